"""
Thin-lens defocus blur as a sparse, spatially varying Gaussian operator.

Every source pixel with blur diameter ``D`` (pixels) spreads its value over
the integer offsets ``|dk|, |dl| <= D/2`` with a Gaussian of ``sigma = D/6``.
The operator is stored scatter-form: row ``p`` of the CSR matrix holds the
weights source pixel ``p`` sends to each output pixel.  Rendering applies
the transpose (a gather), and the reverse-mode pass applies the matrix
itself, so one structure serves both directions.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from ._parallel import chunk_bounds, run_chunks
from .imagecore import CameraSettings, ImageFormatError, SensorModelParams, as_depth, as_roi

# Below this diameter a pixel maps onto itself with weight 1.
PASS_THROUGH_DIAMETER = 1.0
_CHUNK_ENTRIES = 1 << 22


class DepthError(ValueError):
    pass


def blur_diameters(depth, settings: CameraSettings, params: SensorModelParams, roi=None) -> np.ndarray:
    """Defocus blur diameter per pixel, in pixels.

    ``D = G_defocus * f**2 * |d - U| / (N * C * d * (U - f))``.  Depths at or
    inside the focal length are an error wherever the ROI is effective;
    outside the ROI they are mapped to zero blur.
    """
    depth = as_depth(depth)
    f = settings.focal_length
    U = settings.focus_distance
    valid = depth > f
    if roi is not None:
        roi = as_roi(roi, depth.shape)
        if np.any(~valid & roi):
            raise DepthError("depth inside focal length")
    elif not np.all(valid):
        raise DepthError("depth inside focal length")
    d = np.where(valid, depth, U)
    num = params.defocus_gain * f * f * np.abs(d - U)
    den = settings.aperture_number * settings.pixel_size * d * (U - f)
    diam = num / den
    if roi is not None:
        diam = np.where(roi, diam, 0.0)
    return diam


class BlurWeightMatrix:
    """Sparse ``(H*W) x (H*W)`` defocus operator, rows keyed by source pixel."""

    def __init__(self, matrix: sp.csr_matrix, shape: tuple[int, int]):
        n = shape[0] * shape[1]
        if matrix.shape != (n, n):
            raise ValueError(f"matrix shape {matrix.shape} does not match image {shape}")
        self.matrix = matrix.tocsr()
        self.shape = (int(shape[0]), int(shape[1]))

    @classmethod
    def identity(cls, shape) -> "BlurWeightMatrix":
        n = shape[0] * shape[1]
        return cls(sp.identity(n, format="csr", dtype=np.float64), shape)

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def nnz_per_source(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def _flat(self, img) -> tuple[np.ndarray, tuple]:
        img = np.asarray(img)
        if img.shape[:2] != self.shape:
            raise ImageFormatError(f"image shape {img.shape[:2]} does not match operator {self.shape}")
        return img.reshape(self.shape[0] * self.shape[1], -1), img.shape

    def apply(self, img) -> np.ndarray:
        """Blur ``img``: ``y[kl] = sum_ij w[ij, kl] * x[ij]`` per channel."""
        flat, shape = self._flat(img)
        # CSR transpose is a CSC view; no copy of the weights
        return (self.matrix.T @ flat).reshape(shape)

    def apply_transpose(self, cot) -> np.ndarray:
        flat, shape = self._flat(cot)
        return (self.matrix @ flat).reshape(shape)


def window_half_width(diam: np.ndarray) -> np.ndarray:
    """Integer half-width of the blur window: offsets with ``|k| <= D/2``."""
    h = np.floor(np.asarray(diam) / 2.0).astype(np.int64)
    return np.where(np.asarray(diam) < PASS_THROUGH_DIAMETER, 0, h)


def build_blur_weights(diam, normalize: bool = True, threads: int | None = None) -> BlurWeightMatrix:
    """Assemble the scatter-form operator for a blur diameter map.

    ``normalize=True`` rescales each source pixel's clipped window to sum
    to one; ``normalize=False`` keeps the continuous ``1/(2 pi sigma^2)``
    prefactor as written in the thin-lens kernel.
    """
    diam = np.asarray(diam, dtype=np.float64)
    if diam.ndim != 2:
        raise ValueError("diameter map must be 2-D")
    if not np.all(np.isfinite(diam)) or np.any(diam < 0):
        raise ValueError("blur diameters must be finite and >= 0")
    H, W = diam.shape
    n = H * W
    half = window_half_width(diam).ravel()
    rows_i, cols_j = np.divmod(np.arange(n), W)

    # clipped window extents give the per-row entry counts up front
    k0 = np.maximum(rows_i - half, 0)
    k1 = np.minimum(rows_i + half, H - 1)
    l0 = np.maximum(cols_j - half, 0)
    l1 = np.minimum(cols_j + half, W - 1)
    counts = (k1 - k0 + 1) * (l1 - l0 + 1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    index_dtype = np.int32 if max(nnz, n) < 2**31 else np.int64
    indices = np.empty(nnz, dtype=index_dtype)
    data = np.empty(nnz, dtype=np.float64)

    sigma = diam.ravel() / 6.0
    jobs = []
    for h in np.unique(half):
        members = np.flatnonzero(half == h)
        per = max(1, _CHUNK_ENTRIES // (2 * int(h) + 1) ** 2)
        jobs.extend((int(h), members[s:e]) for s, e in chunk_bounds(members.size, per))

    def fill(start, stop):
        for h, pix in jobs[start:stop]:
            _fill_group(h, pix, rows_i, cols_j, sigma, H, W, indptr, indices, data, normalize)

    run_chunks(fill, [(i, i + 1) for i in range(len(jobs))], threads)
    matrix = sp.csr_matrix((data, indices, indptr.astype(index_dtype)), shape=(n, n))
    matrix.has_sorted_indices = True
    return BlurWeightMatrix(matrix, (H, W))


def _fill_group(h, pix, rows_i, cols_j, sigma, H, W, indptr, indices, data, normalize):
    off = np.arange(-h, h + 1)
    dk = np.repeat(off, off.size)
    dl = np.tile(off, off.size)
    k = rows_i[pix, None] + dk[None, :]
    l = cols_j[pix, None] + dl[None, :]
    inside = (k >= 0) & (k < H) & (l >= 0) & (l < W)
    if h == 0:
        w = np.ones((pix.size, 1))
    else:
        s = sigma[pix, None]
        w = np.exp(-(dk * dk + dl * dl)[None, :] / (2.0 * s * s))
        if normalize:
            w = np.where(inside, w, 0.0)
            w /= w.sum(axis=1, keepdims=True)
        else:
            w = w / (2.0 * math.pi * s * s)
    # row-major offsets keep each row's column indices sorted
    dest = indptr[pix]
    counts = inside.sum(axis=1)
    pos = np.repeat(dest - np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
    pos += np.arange(pos.size)
    indices[pos] = (k * W + l)[inside]
    data[pos] = w[inside]


def apply_blur(img, weights: BlurWeightMatrix) -> np.ndarray:
    return weights.apply(img)
