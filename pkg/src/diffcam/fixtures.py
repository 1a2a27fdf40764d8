"""
Synthetic calibration targets.

Each generator returns radiance, depth and ROI arrays for a flat white
field, a slanted high-contrast edge, or a grid of coloured patches, so
every calibration procedure can run end-to-end without photographs.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .imagecore import CameraSettings

SCENE_KINDS = ("flat_field", "slant_edge", "checker_grid")


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and radiometry of one synthetic target.

    ``level`` scales every radiance.  For slant edges ``bright`` and
    ``dark`` are the two reflectances and ``tilt_deg`` is the edge angle
    from vertical.  Checker grids take ``grid`` patches (rows, cols) with
    per-patch RGB ``reflectances``; a ``gap`` of background pixels at
    ``background`` reflectance separates neighbouring patches.
    """

    kind: str = "flat_field"
    height: int = 64
    width: int = 64
    depth: float = 1.0
    level: float = 1.0
    tilt_deg: float = 5.0
    bright: float = 1.0
    dark: float = 0.05
    edge_offset: float = 0.0
    grid: tuple[int, int] = (10, 12)
    reflectances: tuple = ()
    gap: int = 2
    background: float = 0.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise SceneSpecError(f"kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if self.height < 1 or self.width < 1:
            raise SceneSpecError("image dimensions must be positive")
        if not (self.depth > 0 and math.isfinite(self.depth)):
            raise SceneSpecError("depth must be positive")
        if not self.level >= 0:
            raise SceneSpecError("level must be >= 0")
        if self.kind == "slant_edge" and not 0.0 < self.tilt_deg <= 45.0:
            raise SceneSpecError(f"tilt_deg must lie in (0, 45], got {self.tilt_deg!r}")
        for name in ("bright", "dark", "background"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SceneSpecError(f"{name} reflectance must lie in [0, 1]")
        refl = np.asarray(self.reflectances, dtype=float)
        if refl.size and (np.any(refl < 0) or np.any(refl > 1)):
            raise SceneSpecError("reflectances must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise SceneSpecError(f"unknown scene key(s): {', '.join(unknown)}")
        doc = dict(doc)
        if "grid" in doc:
            doc["grid"] = tuple(doc["grid"])
        if "reflectances" in doc:
            doc["reflectances"] = tuple(tuple(r) if np.ndim(r) else r for r in doc["reflectances"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SceneSpecError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _constant_depth(spec: SceneSpec) -> np.ndarray:
    return np.full((spec.height, spec.width), float(spec.depth))


def gen_flat_field(spec: SceneSpec):
    """Uniform radiance ``level``, constant depth, full ROI."""
    if not spec.level > 0:
        raise SceneSpecError("flat field level must be > 0")
    radiance = np.full((spec.height, spec.width, 3), float(spec.level))
    return radiance, _constant_depth(spec), np.ones((spec.height, spec.width), dtype=bool)


def _ramp_integral(u):
    # antiderivative of clip(u, 0, 1)
    return np.where(u <= 0, 0.0, np.where(u >= 1, u - 0.5, 0.5 * u * u))


def edge_coverage(height: int, width: int, tilt_deg: float, offset: float = 0.0) -> np.ndarray:
    """Exact area of each pixel lying left of a tilted line.

    The line passes through the image centre shifted right by ``offset``
    pixels and leans ``tilt_deg`` from vertical, moving right as rows go
    down.  Pixel ``(i, j)`` covers ``[j-0.5, j+0.5] x [i-0.5, i+0.5]``.
    """
    s = math.tan(math.radians(tilt_deg))
    ci, cj = (height - 1) / 2.0, (width - 1) / 2.0
    i = np.arange(height, dtype=np.float64)[:, None]
    j = np.arange(width, dtype=np.float64)[None, :]
    # horizontal extent of the line left of pixel's left edge at row y:
    # u(y) = cj + offset + s (y - ci) - (j - 0.5)
    base = cj + offset - s * ci - (j - 0.5)
    y0, y1 = i - 0.5, i + 0.5
    if s == 0:
        return np.broadcast_to(np.clip(base + 0 * i, 0, 1), (height, width)).copy()
    return (_ramp_integral(base + s * y1) - _ramp_integral(base + s * y0)) / s


def gen_slant_edge(spec: SceneSpec):
    """Bright-left / dark-right edge, anti-aliased by exact pixel coverage."""
    if not 0.0 < spec.tilt_deg <= 45.0:
        raise SceneSpecError(f"tilt_deg must lie in (0, 45], got {spec.tilt_deg!r}")
    cov = edge_coverage(spec.height, spec.width, spec.tilt_deg, spec.edge_offset)
    refl = spec.dark + (spec.bright - spec.dark) * cov
    radiance = np.repeat((spec.level * refl)[..., None], 3, axis=2)
    return radiance, _constant_depth(spec), np.ones((spec.height, spec.width), dtype=bool)


@dataclass(frozen=True)
class ProbeRegion:
    """Pixel rectangle ``[r0, r1) x [c0, c1)`` of one patch."""

    index: int
    r0: int
    r1: int
    c0: int
    c1: int

    def slices(self):
        return slice(self.r0, self.r1), slice(self.c0, self.c1)


def default_reflectances(n: int, seed: int = 0) -> np.ndarray:
    """Deterministic RGB reflectances in ``[0.05, 0.95]`` for ``n`` patches."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.05, 0.95, (n, 3))


def gen_checker_grid(spec: SceneSpec):
    """Grid of constant patches; returns ``(radiance, depth, roi, regions)``.

    Radiance inside patch ``p`` is ``level * reflectance[p]``.  Each region
    yields three probe values (R, G, B).
    """
    rows, cols = spec.grid
    n = rows * cols
    refl = np.asarray(spec.reflectances, dtype=float) if len(spec.reflectances) else default_reflectances(n)
    if refl.ndim == 1:
        refl = np.repeat(refl[:, None], 3, axis=1)
    if refl.shape != (n, 3):
        raise SceneSpecError(f"need {n} reflectances (one RGB triple per patch), got shape {refl.shape}")
    ph = (spec.height - spec.gap * (rows + 1)) // rows
    pw = (spec.width - spec.gap * (cols + 1)) // cols
    if ph < 1 or pw < 1:
        raise SceneSpecError("image too small for the requested grid and gap")
    radiance = np.full((spec.height, spec.width, 3), spec.level * spec.background)
    regions = []
    for p, (r, c) in enumerate(itertools.product(range(rows), range(cols))):
        r0 = spec.gap + r * (ph + spec.gap)
        c0 = spec.gap + c * (pw + spec.gap)
        region = ProbeRegion(p, r0, r0 + ph, c0, c0 + pw)
        radiance[region.slices()] = spec.level * refl[p]
        regions.append(region)
    return radiance, _constant_depth(spec), np.ones((spec.height, spec.width), dtype=bool), regions


def probe_means(img, regions) -> np.ndarray:
    """Mean value per region and channel, shape ``(len(regions), C)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return np.array([img[r.slices()].reshape(-1, img.shape[2]).mean(axis=0) for r in regions])


def generate(spec: SceneSpec):
    """Dispatch on ``spec.kind``; always returns ``(radiance, depth, roi)``."""
    if spec.kind == "flat_field":
        return gen_flat_field(spec)
    if spec.kind == "slant_edge":
        return gen_slant_edge(spec)
    return gen_checker_grid(spec)[:3]


# ---------------------------------------------------------------------------
# Camera-setting sweeps
# ---------------------------------------------------------------------------
def exposure_sweep(times, apertures, isos, base: CameraSettings | None = None) -> list[CameraSettings]:
    """Every ``(t, N, ISO)`` combination, ``len(times)*len(apertures)*len(isos)`` settings."""
    base = base or CameraSettings()
    return [_replace(base, exposure_time=t, aperture_number=N, iso=iso)
            for t, N, iso in itertools.product(times, apertures, isos)]


def stop_sweep(base: CameraSettings, factor: str, steps: int) -> list[CameraSettings]:
    """Settings that double the exposure at each step by changing one factor.

    ``factor`` is ``"t"``, ``"iso"`` or ``"aperture"`` (``N`` shrinks by
    ``sqrt(2)`` per step).
    """
    out = []
    for k in range(steps):
        if factor == "t":
            out.append(_replace(base, exposure_time=base.exposure_time * 2.0 ** k))
        elif factor == "iso":
            out.append(_replace(base, iso=base.iso * 2.0 ** k))
        elif factor == "aperture":
            out.append(_replace(base, aperture_number=base.aperture_number * 2.0 ** (-k / 2.0)))
        else:
            raise ValueError(f"unknown sweep factor {factor!r}")
    return out


def _replace(settings: CameraSettings, **changes) -> CameraSettings:
    from dataclasses import replace

    return replace(settings, **changes)


DEFOCUS_GRID_MM = (162, 312, 612, 998, 2023)

# Desk-scale slant-edge rig: 5 mm lens at f/1.6.  The pixel pitch is a
# synthetic choice; the real sensor's pitch is not part of the data.
DEFOCUS_RIG = CameraSettings(aperture_number=1.6, exposure_time=0.256, iso=1.0, focus_distance=1.0,
                             focal_length=0.005, pixel_size=3e-6, sensor_width=256 * 3e-6)


def defocus_conditions(grid_mm=DEFOCUS_GRID_MM) -> list[tuple[float, float]]:
    """All ``(d, U)`` pairs in metres, depth-major: 25 for the default grid."""
    return [(d / 1000.0, U / 1000.0) for d in grid_mm for U in grid_mm]
