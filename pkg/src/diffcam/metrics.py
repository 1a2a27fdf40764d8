"""Image comparison metrics restricted to effective (ROI) pixels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    effective_pixel_count: int

    def to_dict(self) -> dict:
        finite = math.isfinite(self.psnr)
        return {
            "psnr": self.psnr if finite else None,
            "inf": not finite,
            "ssim": self.ssim,
            "effective_pixel_count": self.effective_pixel_count,
            "channel_convention": "3x",
        }


def _prepare(pred, truth, roi):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[..., None], truth[..., None]
    if roi is None:
        roi = np.ones(pred.shape[:2], dtype=bool)
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != pred.shape[:2]:
        raise MetricError(f"ROI shape {roi.shape} does not match image {pred.shape[:2]}")
    return pred, truth, roi


def psnr_effective(pred, truth, roi=None) -> float:
    """PSNR over ROI pixels; the pixel count includes every channel.

    Returns ``math.inf`` when the images agree on the ROI.
    """
    pred, truth, roi = _prepare(pred, truth, roi)
    n_roi = int(roi.sum())
    if n_roi == 0:
        raise MetricError("empty ROI")
    diff = (pred[roi] - truth[roi]).ravel()
    sse = math.fsum(diff * diff)
    if sse == 0.0:
        return math.inf
    return -10.0 * math.log10(sse / (n_roi * pred.shape[2]))


def ssim_map(pred, truth) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5), per channel."""
    pred, truth, _ = _prepare(pred, truth, None)
    out = np.empty(pred.shape)
    for c in range(pred.shape[2]):
        x, y = pred[..., c], truth[..., c]

        def blur(a):
            return gaussian_filter(a, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        out[..., c] = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
                       / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
    return out


def ssim(pred, truth, roi=None) -> float:
    """Mean SSIM over ROI pixels whose full window lies inside the image."""
    pred, truth, roi = _prepare(pred, truth, roi)
    r = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    H, W = roi.shape
    if H < 2 * r + 1 or W < 2 * r + 1:
        raise MetricError("image smaller than the 11x11 SSIM window")
    valid = np.zeros_like(roi)
    valid[r:H - r, r:W - r] = roi[r:H - r, r:W - r]
    if not valid.any():
        raise MetricError("ROI smaller than the 11x11 SSIM window")
    smap = ssim_map(pred, truth)
    return float(smap[valid].mean())


def compare(pred, truth, roi=None) -> MetricReport:
    pred, truth, roi = _prepare(pred, truth, roi)
    return MetricReport(psnr_effective(pred, truth, roi), ssim(pred, truth, roi), int(roi.sum()) * pred.shape[2])
