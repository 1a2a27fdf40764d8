"""
Forward camera model.

Layer order: distortion -> vignetting -> ROI mask -> defocus blur ->
aggregator -> noise -> CRF / 16-bit quantization.  Every layer can be
switched off through :class:`LayerToggles`.  :func:`forward` keeps the
state the reverse-mode pass in :mod:`diffcam.grad` needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .blur import BlurWeightMatrix, blur_diameters, build_blur_weights
from .imagecore import (
    RAW_MAX,
    CameraSettings,
    ImageFormatError,
    LayerToggles,
    SensorModelParams,
    as_radiance,
    as_roi,
    pixel_coordinates,
)
from .noise import add_noise, dark_mean

CRF_EPS = 1e-12
BASELINE_EXPOSURE = 0.256

PRESETS = {
    "full": LayerToggles(distortion=False, vignetting=True, defocus=True, aggregator=True,
                         noise=False, crf=True, exposure_ratio_fallback=False),
    "no-defocus": LayerToggles(distortion=False, vignetting=True, defocus=False, aggregator=True,
                               noise=False, crf=True, exposure_ratio_fallback=False),
    "no-exposure": LayerToggles(distortion=False, vignetting=False, defocus=True, aggregator=False,
                                noise=False, crf=False, exposure_ratio_fallback=True),
    "no-camera": LayerToggles(distortion=False, vignetting=False, defocus=False, aggregator=False,
                              noise=False, crf=False, exposure_ratio_fallback=True),
}


class PipelineError(ValueError):
    pass


def compute_fov(settings: CameraSettings) -> float:
    """Horizontal field of view in radians, ``2 atan(w_sensor / 2f)``."""
    return 2.0 * math.atan(settings.sensor_width / (2.0 * settings.focal_length))


# ---------------------------------------------------------------------------
# Lens distortion
# ---------------------------------------------------------------------------
@lru_cache(maxsize=16)
def _distortion_matrix(shape, k1, k2, k3, focal_length, pixel_size) -> sp.csr_matrix:
    H, W = shape
    n = H * W
    if k1 == 0 and k2 == 0 and k3 == 0:
        return sp.identity(n, format="csr", dtype=np.float64)
    ci, cj = (H - 1) / 2.0, (W - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    # normalized coordinates (a/f, b/f)
    scale = pixel_size / focal_length
    r2 = ((jj - cj) * scale) ** 2 + ((ii - ci) * scale) ** 2
    factor = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    src_i = ci + (ii - ci) * factor
    src_j = cj + (jj - cj) * factor
    i0 = np.floor(src_i)
    j0 = np.floor(src_j)
    fi = src_i - i0
    fj = src_j - j0
    rows, cols, vals = [], [], []
    out = np.arange(n)
    for di, dj, w in ((0, 0, (1 - fi) * (1 - fj)), (0, 1, (1 - fi) * fj),
                      (1, 0, fi * (1 - fj)), (1, 1, fi * fj)):
        si = (i0 + di).ravel().astype(np.int64)
        sj = (j0 + dj).ravel().astype(np.int64)
        w = w.ravel()
        ok = (si >= 0) & (si < H) & (sj >= 0) & (sj < W) & (w != 0)
        rows.append(out[ok])
        cols.append(si[ok] * W + sj[ok])
        vals.append(w[ok])
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return m.tocsr()


def distortion_matrix(shape, settings: CameraSettings, params: SensorModelParams) -> sp.csr_matrix:
    """Bilinear remap operator: ``out.ravel() = M @ img.ravel()`` per channel.

    Output pixel at normalized radius ``r`` samples the input at
    ``r (1 + k1 r^2 + k2 r^4 + k3 r^6)``; samples falling outside the
    image contribute zero.
    """
    return _distortion_matrix(tuple(shape[:2]), float(params.k1), float(params.k2), float(params.k3),
                              float(settings.focal_length), float(settings.pixel_size))


def _apply_flat(m: sp.spmatrix, img: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    return (m @ img.reshape(H * W, -1)).reshape(img.shape).astype(img.dtype, copy=False)


def distort(img, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    img = np.asarray(img)
    return _apply_flat(distortion_matrix(img.shape, settings, params), img)


# ---------------------------------------------------------------------------
# Vignetting
# ---------------------------------------------------------------------------
def vignette_factor(shape, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    """``1 - G_vignet (1 - cos^4 theta)`` with ``theta = atan(r / f)``."""
    a, b = pixel_coordinates(shape, settings.pixel_size)
    f2 = settings.focal_length ** 2
    cos2 = f2 / (f2 + a * a + b * b)
    return 1.0 - params.vignetting_gain * (1.0 - cos2 * cos2)


def vignette(img, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    img = np.asarray(img)
    fac = vignette_factor(img.shape, settings, params)
    return img * fac.reshape(fac.shape + (1,) * (img.ndim - 2)).astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# Aggregator
# ---------------------------------------------------------------------------
def aggregator_gain(settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    """Per-channel factor ``G_agg QE L_scene C^2 t / N^2``."""
    common = (settings.scene_illumination * settings.pixel_size ** 2 * settings.exposure_time
              / settings.aperture_number ** 2)
    return np.asarray(params.aggregator_qe_rgb, dtype=np.float64) * common


def aggregate(img, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    """Irradiance to accumulated energy per pixel and channel."""
    img = np.asarray(img)
    return img * aggregator_gain(settings, params).astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# Camera response
# ---------------------------------------------------------------------------
def crf_response(x, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    """Continuous digital value before clamping and rounding."""
    x = np.asarray(x)
    iso, a = settings.iso, params.crf_a
    b = np.asarray(params.crf_b_rgb, dtype=np.float64)
    if params.crf_kind == "linear":
        return a * iso * x + b
    if params.crf_kind == "gamma":
        return np.maximum(a * iso * x, CRF_EPS) ** params.crf_gamma
    arg = np.maximum(iso * x, CRF_EPS)
    return RAW_MAX / (1.0 + np.exp(-a * np.log2(arg) - b))


def quantize(dv) -> np.ndarray:
    """Clamp to the 16-bit range and round half to even."""
    return np.rint(np.clip(dv, 0, RAW_MAX)).astype(np.uint16)


def apply_crf(x, settings: CameraSettings, params: SensorModelParams, quantized: bool = True) -> np.ndarray:
    dv = crf_response(x, settings, params)
    if quantized:
        return quantize(dv)
    return np.clip(dv, 0, RAW_MAX)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------
@dataclass
class PipelineState:
    """Everything the reverse pass needs from one forward evaluation."""

    toggles: LayerToggles
    settings: CameraSettings
    params: SensorModelParams
    shape: tuple
    distortion: sp.csr_matrix | None = None
    vignette: np.ndarray | None = None
    roi: np.ndarray | None = None
    blur: BlurWeightMatrix | None = None
    aggregator: np.ndarray | None = None
    crf_input: np.ndarray | None = None
    pre_clip: np.ndarray | None = None
    fallback_scale: float = 1.0
    output: np.ndarray | None = None  # continuous, pre-rounding


def forward(radiance, depth, roi, settings: CameraSettings, params: SensorModelParams,
            toggles: LayerToggles, seed: int = 0, dtype=np.float64, threads=None,
            blur_weights: BlurWeightMatrix | None = None) -> tuple[np.ndarray, PipelineState]:
    """Run the enabled layers and return ``(continuous_output, state)``.

    The continuous output is clamped to ``[0, 65535]`` but not rounded.
    """
    x = as_radiance(radiance, dtype=dtype)
    shape = x.shape
    state = PipelineState(toggles, settings, params, shape)
    if roi is not None:
        state.roi = as_roi(roi, shape)
    if toggles.defocus and depth is None and blur_weights is None:
        raise PipelineError("defocus requires depth")
    if depth is not None and np.shape(depth) != shape[:2]:
        raise ImageFormatError(f"depth shape {np.shape(depth)} does not match radiance {shape[:2]}")

    if toggles.distortion:
        state.distortion = distortion_matrix(shape, settings, params)
        x = _apply_flat(state.distortion, x)
    if toggles.vignetting:
        state.vignette = vignette_factor(shape, settings, params)
        x = x * state.vignette[..., None].astype(dtype)
    if state.roi is not None:
        x = x * state.roi[..., None]
    if toggles.defocus:
        if blur_weights is None:
            diam = blur_diameters(depth, settings, params, roi=state.roi)
            blur_weights = build_blur_weights(diam, threads=threads)
        state.blur = blur_weights
        x = blur_weights.apply(x).astype(dtype, copy=False)
    if toggles.aggregator:
        state.aggregator = aggregator_gain(settings, params)
        x = x * state.aggregator.astype(dtype)
    if toggles.noise:
        x = add_noise(x, settings, params, seed, threads=threads).astype(dtype, copy=False)
    if toggles.exposure_ratio_fallback and not toggles.aggregator and not toggles.crf:
        state.fallback_scale = settings.exposure_time / BASELINE_EXPOSURE
        x = x * state.fallback_scale
    if toggles.crf:
        state.crf_input = x
        out = apply_crf(x, settings, params, quantized=False)
    else:
        state.pre_clip = x
        out = np.clip(x, 0, RAW_MAX)
    state.output = out
    return out, state


def run_pipeline(radiance, depth, roi, settings: CameraSettings, params: SensorModelParams,
                 toggles: LayerToggles, seed: int = 0, dtype=np.float64, threads=None,
                 blur_weights: BlurWeightMatrix | None = None) -> np.ndarray:
    """Render a 16-bit RAW image, shape ``(H, W, 3)``, dtype uint16."""
    out, _ = forward(radiance, depth, roi, settings, params, toggles, seed=seed, dtype=dtype,
                     threads=threads, blur_weights=blur_weights)
    return quantize(out)


__all__ = [
    "PRESETS", "PipelineError", "PipelineState", "compute_fov", "distortion_matrix", "distort",
    "vignette_factor", "vignette", "aggregator_gain", "aggregate", "crf_response", "apply_crf",
    "quantize", "forward", "run_pipeline", "add_noise", "dark_mean", "CRF_EPS",
]
