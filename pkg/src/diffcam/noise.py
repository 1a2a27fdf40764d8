"""
Dark current and Poisson-Gaussian sensor noise.

Random draws come from a counter-based Philox stream keyed on
``(seed, layer id)``; the counter is the flat sample index
``(i*W + j)*C + c``.  Each sample consumes exactly one Philox block (four
64-bit words), so any chunking of the image reproduces the same values.
"""

from __future__ import annotations

import numpy as np

from ._parallel import chunk_bounds, run_chunks
from .imagecore import CameraSettings, SensorModelParams

NOISE_LAYER_ID = 5
_CHUNK = 1 << 18
_U53 = 1.0 / 9007199254740992.0  # 2**-53


def _key(seed: int, layer: int) -> np.ndarray:
    return np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, layer], dtype=np.uint64)


def _uniform(words: np.ndarray) -> np.ndarray:
    # (0, 1]: never zero, so log() below is safe
    return ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _U53


def standard_normal_pairs(seed: int, count: int, layer: int = NOISE_LAYER_ID, threads=None):
    """Two independent standard normal arrays of length ``count``.

    Sample ``e`` depends only on ``(seed, layer, e)``.
    """
    key = _key(seed, layer)
    z1 = np.empty(count)
    z2 = np.empty(count)

    def fill(start, stop):
        gen = np.random.Philox(key=key, counter=start)
        w = gen.random_raw(4 * (stop - start)).reshape(-1, 4)
        u = _uniform(w)
        r1 = np.sqrt(-2.0 * np.log(u[:, 0]))
        r2 = np.sqrt(-2.0 * np.log(u[:, 2]))
        z1[start:stop] = r1 * np.cos(2.0 * np.pi * u[:, 1])
        z2[start:stop] = r2 * np.cos(2.0 * np.pi * u[:, 3])

    run_chunks(fill, chunk_bounds(count, _CHUNK), threads)
    return z1, z2


def dark_mean(energy, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    """Mean signal after dark current: ``mu = x + D_dark * t``."""
    return np.asarray(energy) + params.dark_current * settings.exposure_time


def add_noise(energy, settings: CameraSettings, params: SensorModelParams, seed: int, threads=None) -> np.ndarray:
    """Sample ``Y = mu + eps_shot + eps_read``.

    Shot noise is the Gaussian approximation of Poisson with variance
    ``G_noise**2 * max(mu, 0)``; read noise has variance ``sigma_read**2``.
    """
    mu = dark_mean(energy, settings, params)
    if params.noise_gain == 0 and params.read_sigma == 0:
        return mu.copy()
    z_shot, z_read = standard_normal_pairs(seed, mu.size, threads=threads)
    shot_sd = params.noise_gain * np.sqrt(np.maximum(mu, 0.0))
    out = mu + shot_sd * z_shot.reshape(mu.shape) + params.read_sigma * z_read.reshape(mu.shape)
    return out.astype(mu.dtype, copy=False)
