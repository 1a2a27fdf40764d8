import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffcam.blur import (
    BlurWeightMatrix,
    DepthError,
    apply_blur,
    blur_diameters,
    build_blur_weights,
    window_half_width,
)
from diffcam.grad import vjp_blur
from diffcam.imagecore import CameraSettings, SensorModelParams

SETTINGS = CameraSettings(aperture_number=2.0, focal_length=0.005, pixel_size=5e-6, focus_distance=1.0)


def _dense_oracle(diam):
    """Scatter matrix built pixel by pixel from the kernel definition."""
    H, W = diam.shape
    M = np.zeros((H * W, H * W))
    for i in range(H):
        for j in range(W):
            D = diam[i, j]
            if D < 1.0:
                M[i * W + j, i * W + j] = 1.0
                continue
            h = int(math.floor(D / 2))
            s = D / 6.0
            for k in range(max(0, i - h), min(H, i + h + 1)):
                for l in range(max(0, j - h), min(W, j + h + 1)):
                    M[i * W + j, k * W + l] = math.exp(-((k - i) ** 2 + (l - j) ** 2) / (2 * s * s))
            M[i * W + j] /= M[i * W + j].sum()
    return M


def test_diameter_reference_value():
    d = np.full((2, 2), 2.0)
    D = blur_diameters(d, SETTINGS, SensorModelParams())
    expected = 1.0 * 0.005 ** 2 * 1.0 / (2.0 * 5e-6 * 2.0 * (1.0 - 0.005))
    np.testing.assert_allclose(D, expected, rtol=1e-15)
    assert abs(D[0, 0] - 1.2563) < 1e-4


def test_diameter_zero_in_focus_and_linear_in_gain():
    d = np.array([[1.0, 0.5], [3.0, 10.0]])
    D1 = blur_diameters(d, SETTINGS, SensorModelParams(defocus_gain=1.0))
    D2 = blur_diameters(d, SETTINGS, SensorModelParams(defocus_gain=2.0))
    assert D1[0, 0] == 0.0
    np.testing.assert_allclose(D2, 2 * D1, rtol=1e-15)


def test_depth_inside_focal_length():
    d = np.array([[1.0, 0.004]])
    with pytest.raises(DepthError, match="depth inside focal length"):
        blur_diameters(d, SETTINGS, SensorModelParams())
    # outside the ROI the bad depth is ignored
    D = blur_diameters(d, SETTINGS, SensorModelParams(), roi=np.array([[True, False]]))
    assert D[0, 1] == 0.0


def test_zero_diameters_give_identity():
    W = build_blur_weights(np.zeros((5, 4)))
    np.testing.assert_array_equal(W.to_dense(), np.eye(20))


def test_center_weight_matches_gaussian_peak():
    diam = np.zeros((15, 15))
    diam[7, 7] = 6.0
    W = build_blur_weights(diam)
    off = np.arange(-3, 4)
    g = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / 2.0)
    row = W.to_dense()[7 * 15 + 7].reshape(15, 15)
    assert row[7, 7] == pytest.approx(1.0 / g.sum(), rel=1e-14)
    np.testing.assert_allclose(row[4:11, 4:11], g / g.sum(), rtol=1e-13)
    assert np.count_nonzero(row) == 49


def test_matches_dense_oracle():
    rng = np.random.default_rng(0)
    diam = rng.uniform(0, 9, (8, 8))
    np.testing.assert_allclose(build_blur_weights(diam).to_dense(), _dense_oracle(diam), rtol=1e-13, atol=1e-16)


def test_unnormalized_mode_uses_continuous_prefactor():
    diam = np.zeros((9, 9))
    diam[4, 4] = 6.0
    row = build_blur_weights(diam, normalize=False).to_dense()[40]
    assert row[40] == pytest.approx(1.0 / (2 * math.pi))


def test_window_half_width():
    np.testing.assert_array_equal(window_half_width(np.array([0.0, 0.9, 1.0, 1.9, 2.0, 5.5, 6.0])),
                                  [0, 0, 0, 0, 1, 2, 3])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(0, 14, allow_nan=False)))
def test_rows_sum_to_one_and_sparsity(diam):
    W = build_blur_weights(diam)
    np.testing.assert_allclose(W.row_sums(), 1.0, atol=1e-12)
    assert np.all(W.matrix.data >= 0)
    assert np.all(W.nnz_per_source() <= (np.floor(diam.ravel()) + 2) ** 2)


def test_constant_image_interior_roi_conserves_sums():
    H = W = 32
    roi = np.zeros((H, W), bool)
    roi[8:24, 8:24] = True
    diam = np.where(roi, 6.0, 0.0)
    img = np.where(roi[..., None], 0.7, 0.0) * np.ones((H, W, 3))
    out = apply_blur(img, build_blur_weights(diam))
    np.testing.assert_allclose(out.sum(axis=(0, 1)), img.sum(axis=(0, 1)), rtol=1e-12)


def test_constant_image_without_clipping_is_unchanged():
    # uniform D = 5 (half-width 2): pixels 4+ away from the border see no clipping
    diam = np.full((20, 20), 5.0)
    img = np.full((20, 20, 3), 0.25)
    np.testing.assert_allclose(apply_blur(img, build_blur_weights(diam))[4:16, 4:16], 0.25, rtol=1e-12)


def test_apply_matches_dense_and_adjoint():
    rng = np.random.default_rng(4)
    diam = rng.uniform(0, 6, (8, 8))
    W = build_blur_weights(diam)
    M = _dense_oracle(diam)
    x = rng.random((8, 8, 3))
    u = rng.standard_normal((8, 8, 3))
    y = apply_blur(x, W)
    np.testing.assert_allclose(y.reshape(64, 3), M.T @ x.reshape(64, 3), rtol=1e-12)
    g = vjp_blur(u, W)
    np.testing.assert_allclose(g.reshape(64, 3), M @ u.reshape(64, 3), rtol=1e-12)
    assert abs(np.vdot(y, u) - np.vdot(x, g)) <= 1e-10 * max(1.0, abs(np.vdot(y, u)))


def test_identity_operator_passthrough():
    x = np.random.default_rng(5).random((4, 6, 3))
    np.testing.assert_array_equal(apply_blur(x, BlurWeightMatrix.identity((4, 6))), x)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        apply_blur(np.zeros((3, 3, 3)), BlurWeightMatrix.identity((4, 4)))


def test_thread_count_does_not_change_operator():
    rng = np.random.default_rng(6)
    diam = rng.uniform(0, 12, (40, 37))
    a = build_blur_weights(diam, threads=1).matrix
    b = build_blur_weights(diam, threads=4).matrix
    np.testing.assert_array_equal(a.indptr, b.indptr)
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_array_equal(a.data, b.data)
