"""
Image, depth and mask value conventions plus file I/O.

Images are plain numpy arrays, validated on the way in:

* radiance: ``(H, W, 3)`` float, RGB order, finite and >= 0
* depth:    ``(H, W)`` float, metres, finite
* roi:      ``(H, W)`` bool, True marks an effective pixel
* raw16:    ``(H, W, 3)`` uint16 digital values

Arrays are row-major with the origin at the top-left pixel.  Image-plane
coordinates are measured from the optical centre in metres:
``a = (j - (W-1)/2) * C`` and ``b = (i - (H-1)/2) * C``.

Camera settings and sensor model parameters are frozen dataclasses that
round-trip through a flat JSON document (one key per field).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

RAW_MAX = 65535
RAW_MAGIC = b"P6-16\n"
CRF_KINDS = ("linear", "gamma", "sigmoid")


class ImageFormatError(ValueError):
    """Raised for malformed or out-of-contract image files and arrays."""


class ParamsError(ValueError):
    """Raised when a parameter document violates the schema."""


# ---------------------------------------------------------------------------
# Array validation
# ---------------------------------------------------------------------------
def as_radiance(arr, dtype=np.float64) -> np.ndarray:
    img = np.asarray(arr, dtype=dtype)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"radiance must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("non-finite radiance")
    if np.any(img < 0):
        raise ImageFormatError("negative radiance")
    return img


def as_depth(arr, dtype=np.float64) -> np.ndarray:
    depth = np.asarray(arr, dtype=dtype)
    if depth.ndim != 2:
        raise ImageFormatError(f"depth must have shape (H, W), got {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise ImageFormatError("non-finite depth")
    return depth


def as_roi(arr, shape=None) -> np.ndarray:
    roi = np.asarray(arr)
    if roi.ndim == 3 and roi.shape[2] == 1:
        roi = roi[..., 0]
    if roi.ndim != 2:
        raise ImageFormatError(f"roi must have shape (H, W), got {roi.shape}")
    if shape is not None and roi.shape != tuple(shape[:2]):
        raise ImageFormatError(f"roi shape {roi.shape} does not match image {tuple(shape[:2])}")
    return roi.astype(bool) if roi.dtype != bool else roi


def as_raw16(arr) -> np.ndarray:
    img = np.asarray(arr)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"RAW16 image must have shape (H, W, 3), got {img.shape}")
    if np.issubdtype(img.dtype, np.floating):
        if not np.all(np.isfinite(img)) or np.any(img != np.round(img)):
            raise ImageFormatError("RAW16 values must be integers")
    if img.size and (img.min() < 0 or img.max() > RAW_MAX):
        raise ImageFormatError("RAW16 values must lie in [0, 65535]")
    return img.astype(np.uint16)


def pixel_coordinates(shape, pixel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Image-plane coordinates ``(a, b)`` in metres, each of shape ``(H, W)``."""
    h, w = shape[:2]
    a = (np.arange(w) - (w - 1) / 2.0) * pixel_size
    b = (np.arange(h) - (h - 1) / 2.0) * pixel_size
    return np.broadcast_to(a[None, :], (h, w)), np.broadcast_to(b[:, None], (h, w))


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------
_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def _read_token_line(f) -> bytes:
    line = f.readline()
    if not line:
        raise ImageFormatError("truncated PFM header")
    return line.rstrip(b"\r\n")


def read_pfm(path) -> np.ndarray:
    """Read a PFM file without range checks.

    Returns ``(H, W, 3)`` for ``PF`` and ``(H, W)`` for ``Pf`` files, as
    float64, flipped to top-left origin.
    """
    with open(path, "rb") as f:
        tag = _read_token_line(f)
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise ImageFormatError(f"malformed PFM header: bad magic {tag!r}")
        dims = _PFM_DIMS.match(_read_token_line(f))
        if dims is None:
            raise ImageFormatError("malformed PFM header: bad dimensions line")
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(_read_token_line(f))
        except ValueError:
            raise ImageFormatError("malformed PFM header: bad scale line") from None
        if scale == 0 or not math.isfinite(scale):
            raise ImageFormatError("malformed PFM header: scale must be finite and nonzero")
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        count = width * height * channels
        raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise ImageFormatError(f"truncated PFM data: expected {count * 4} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype)
    img = data.reshape(height, width, channels)[::-1].astype(np.float64)
    return img[..., 0] if channels == 1 else img


def load_pfm(path) -> np.ndarray:
    """Load a radiance (``PF``) or depth (``Pf``) image.

    Colour files are validated as radiance: NaN, infinite or negative
    samples are rejected.  Grayscale files must be finite.
    """
    img = read_pfm(path)
    if img.ndim == 3:
        return as_radiance(img)
    return as_depth(img)


def save_pfm(path, img, little_endian: bool = True) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        tag, channels = b"Pf", 1
    elif img.ndim == 3 and img.shape[2] == 3:
        tag, channels = b"PF", 3
    else:
        raise ImageFormatError(f"cannot store array of shape {img.shape} as PFM")
    height, width = img.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    scale = b"-1.0" if little_endian else b"1.0"
    body = np.ascontiguousarray(img[::-1].reshape(height, width, channels), dtype=dtype)
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{width} {height}".encode() + b"\n" + scale + b"\n")
        f.write(body.tobytes())


def save_roi(path, roi) -> None:
    """Store a mask as a grayscale PFM with 1.0 for effective pixels."""
    save_pfm(path, as_roi(roi).astype(np.float32))


def load_roi(path) -> np.ndarray:
    img = read_pfm(path)
    if img.ndim != 2:
        raise ImageFormatError("roi file must be a grayscale (Pf) PFM")
    return img > 0.5


# ---------------------------------------------------------------------------
# RAW16 container
# ---------------------------------------------------------------------------
# Layout: b"P6-16\n" b"<W> <H>\n" b"65535\n" then H*W*3 big-endian uint16
# samples, row-major from the top-left pixel, channels interleaved RGB.
def save_raw16(img, path) -> None:
    img = as_raw16(img)
    height, width = img.shape[:2]
    with open(path, "wb") as f:
        f.write(RAW_MAGIC + f"{width} {height}\n{RAW_MAX}\n".encode())
        f.write(np.ascontiguousarray(img, dtype=">u2").tobytes())


def load_raw16(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline() != RAW_MAGIC:
            raise ImageFormatError("not a RAW16 file: bad magic")
        dims = _PFM_DIMS.match(f.readline().rstrip(b"\n"))
        if dims is None:
            raise ImageFormatError("malformed RAW16 header: bad dimensions line")
        if f.readline().strip() != str(RAW_MAX).encode():
            raise ImageFormatError("malformed RAW16 header: maxval must be 65535")
        width, height = int(dims.group(1)), int(dims.group(2))
        count = width * height * 3
        data = np.frombuffer(f.read(), dtype=">u2")
    if data.size != count:
        raise ImageFormatError(f"RAW16 payload has {data.size} samples, expected {count}")
    return data.reshape(height, width, 3).astype(np.uint16)


# ---------------------------------------------------------------------------
# Settings and parameters
# ---------------------------------------------------------------------------
def _rgb(value, name) -> tuple[float, float, float]:
    if np.ndim(value) == 0:
        value = (value,) * 3
    value = tuple(float(v) for v in value)
    if len(value) != 3:
        raise ValueError(f"{name} needs 3 values (R, G, B)")
    return value


@dataclass(frozen=True)
class CameraSettings:
    """User-facing exposure triangle and optics, SI units."""

    aperture_number: float = 2.0
    exposure_time: float = 0.256
    iso: float = 1.0
    focus_distance: float = 1.0
    focal_length: float = 0.005
    pixel_size: float = 5e-6
    sensor_width: float = 0.0064
    scene_illumination: float = 1.0

    def __post_init__(self):
        checks = {
            "aperture_number": self.aperture_number > 0,
            "exposure_time": self.exposure_time > 0,
            "iso": self.iso > 0,
            "focal_length": self.focal_length > 0,
            "pixel_size": self.pixel_size > 0,
            "sensor_width": self.sensor_width > 0,
            "scene_illumination": self.scene_illumination >= 0,
        }
        for name, ok in checks.items():
            if not ok or not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} violates its invariant (got {getattr(self, name)!r})")
        if not self.focus_distance > self.focal_length:
            raise ValueError(
                f"focus_distance must exceed focal_length "
                f"(got {self.focus_distance!r} <= {self.focal_length!r})"
            )


@dataclass(frozen=True)
class SensorModelParams:
    """Calibratable gains of every layer.

    Defaults are the uncalibrated state: multiplicative gains 1, additive
    terms and distortion 0, linear CRF with unit slope.
    """

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    vignetting_gain: float = 1.0
    defocus_gain: float = 1.0
    aggregator_qe_rgb: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dark_current: float = 0.0
    crf_kind: str = "linear"
    crf_a: float = 1.0
    crf_b_rgb: tuple[float, float, float] = (0.0, 0.0, 0.0)
    crf_gamma: float = 1.0
    noise_gain: float = 1.0
    read_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "aggregator_qe_rgb", _rgb(self.aggregator_qe_rgb, "aggregator_qe_rgb"))
        object.__setattr__(self, "crf_b_rgb", _rgb(self.crf_b_rgb, "crf_b_rgb"))
        if self.crf_kind not in CRF_KINDS:
            raise ValueError(f"crf_kind must be one of {CRF_KINDS}, got {self.crf_kind!r}")
        if not 0.0 <= self.vignetting_gain <= 1.0:
            raise ValueError(f"vignetting_gain must lie in [0, 1] (got {self.vignetting_gain!r})")
        for name in ("defocus_gain", "noise_gain", "read_sigma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0 (got {getattr(self, name)!r})")
        if any(not g >= 0 for g in self.aggregator_qe_rgb):
            raise ValueError("aggregator_qe_rgb must be >= 0")
        if not self.crf_gamma > 0:
            raise ValueError(f"crf_gamma must be > 0 (got {self.crf_gamma!r})")
        for name in ("k1", "k2", "k3", "dark_current", "crf_a"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class LayerToggles:
    distortion: bool = True
    vignetting: bool = True
    defocus: bool = True
    aggregator: bool = True
    noise: bool = True
    crf: bool = True
    exposure_ratio_fallback: bool = False

    @classmethod
    def all_off(cls) -> "LayerToggles":
        return cls(False, False, False, False, False, False, False)


_SETTINGS_KEYS = tuple(f.name for f in fields(CameraSettings))
_PARAMS_KEYS = tuple(f.name for f in fields(SensorModelParams))


def params_from_dict(doc: dict[str, Any]) -> tuple[CameraSettings, SensorModelParams]:
    """Build settings and parameters from a flat mapping.

    Unknown keys are rejected; missing keys keep their defaults.  Errors
    name the offending key.
    """
    if not isinstance(doc, dict):
        raise ParamsError("parameter document must be a JSON object")
    unknown = sorted(set(doc) - set(_SETTINGS_KEYS) - set(_PARAMS_KEYS))
    if unknown:
        raise ParamsError(f"unknown parameter key(s): {', '.join(unknown)}")

    def build(cls, keys):
        kwargs = {k: doc[k] for k in keys if k in doc}
        for k, v in kwargs.items():
            if k == "crf_kind":
                if not isinstance(v, str):
                    raise ParamsError(f"{k}: expected a string")
            elif k.endswith("_rgb"):
                if not (isinstance(v, (int, float)) or (isinstance(v, list) and len(v) == 3)):
                    raise ParamsError(f"{k}: expected a number or a list of 3 numbers")
            elif isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ParamsError(f"{k}: expected a number, got {type(v).__name__}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ParamsError(str(exc)) from None

    return build(CameraSettings, _SETTINGS_KEYS), build(SensorModelParams, _PARAMS_KEYS)


def params_to_dict(settings: CameraSettings, params: SensorModelParams) -> dict[str, Any]:
    doc = asdict(settings)
    for k, v in asdict(params).items():
        doc[k] = list(v) if isinstance(v, tuple) else v
    return doc


def load_params(path) -> tuple[CameraSettings, SensorModelParams]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParamsError(f"invalid JSON in {path}: {exc}") from None
    return params_from_dict(doc)


def save_params(path, settings: CameraSettings, params: SensorModelParams) -> None:
    # repr-exact float round-trip comes from json's shortest-repr encoding
    Path(path).write_text(json.dumps(params_to_dict(settings, params), indent=2) + "\n")
