import numpy as np
import pytest

from diffcam import fixtures
from diffcam.fixtures import SceneSpec, SceneSpecError
from diffcam.imagecore import CameraSettings, SensorModelParams, as_depth
from diffcam.pipeline import vignette, vignette_factor


def test_flat_field_constant_full_roi():
    rad, depth, roi = fixtures.gen_flat_field(SceneSpec(height=8, width=9, level=1.0, depth=2.0))
    assert np.all(rad == 1.0) and rad.shape == (8, 9, 3)
    assert roi.all() and np.all(depth == 2.0)


def test_vignetted_flat_field_is_cos4_surface():
    s = CameraSettings(pixel_size=4e-5)
    p = SensorModelParams(vignetting_gain=1.0)
    rad, _, _ = fixtures.gen_flat_field(SceneSpec(height=20, width=30))
    out = vignette(rad, s, p)
    a = (np.arange(30) - 14.5) * 4e-5
    b = (np.arange(20) - 9.5) * 4e-5
    cos_t = s.focal_length / np.sqrt(s.focal_length ** 2 + a[None, :] ** 2 + b[:, None] ** 2)
    np.testing.assert_allclose(out[..., 1], cos_t ** 4, rtol=1e-13)
    np.testing.assert_allclose(vignette_factor((20, 30), s, p), cos_t ** 4, rtol=1e-13)


def test_slant_edge_tilt_zero_forbidden():
    with pytest.raises(SceneSpecError, match="tilt"):
        SceneSpec(kind="slant_edge", tilt_deg=0.0)


def test_slant_edge_bright_fraction():
    for tilt in (3.0, 5.0, 20.0, 45.0):
        cov = fixtures.edge_coverage(64, 80, tilt)
        assert cov.mean() == pytest.approx(0.5, abs=0.01)


def test_edge_coverage_matches_supersampling():
    cov = fixtures.edge_coverage(6, 8, 17.0, offset=0.3)
    n = 64
    sub = (np.arange(n) + 0.5) / n - 0.5
    s = np.tan(np.radians(17.0))
    ref = np.zeros_like(cov)
    for i in range(6):
        for j in range(8):
            y = i + sub[:, None]
            x = j + sub[None, :]
            ref[i, j] = np.mean(x < 3.5 + 0.3 + s * (y - 2.5))
    np.testing.assert_allclose(cov, ref, atol=2.0 / n)


def test_slant_edge_levels_and_depth():
    rad, depth, roi = fixtures.gen_slant_edge(SceneSpec(kind="slant_edge", height=32, width=32, depth=0.5,
                                                        level=2.0))
    assert rad.max() == pytest.approx(2.0) and rad.min() == pytest.approx(0.1)
    assert np.all(depth == 0.5) and roi.all()
    as_depth(depth)


def test_checker_grid_probe_count_and_means():
    spec = SceneSpec(kind="checker_grid", height=62, width=74)
    rad, depth, roi, regions = fixtures.gen_checker_grid(spec)
    assert len(regions) == 120
    means = fixtures.probe_means(rad, regions)
    assert means.size == 360
    np.testing.assert_allclose(means, fixtures.default_reflectances(120), rtol=1e-14)


def test_single_white_patch():
    spec = SceneSpec(kind="checker_grid", height=10, width=10, grid=(1, 1), reflectances=((1.0, 1.0, 1.0),),
                     gap=1)
    rad, _, _, regions = fixtures.gen_checker_grid(spec)
    assert np.all(rad[regions[0].slices()] == 1.0)


def test_checker_grid_wrong_reflectance_count():
    with pytest.raises(SceneSpecError):
        fixtures.gen_checker_grid(SceneSpec(kind="checker_grid", grid=(2, 2), reflectances=(0.5, 0.5)))


def test_generators_deterministic():
    for kind in fixtures.SCENE_KINDS:
        spec = SceneSpec(kind=kind, height=62, width=74)
        a, b = fixtures.generate(spec), fixtures.generate(spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


def test_spec_from_dict_rejects_unknown():
    with pytest.raises(SceneSpecError, match="colour"):
        SceneSpec.from_dict({"kind": "flat_field", "colour": 3})
    spec = SceneSpec.from_dict({"kind": "checker_grid", "grid": [2, 3]})
    assert spec.grid == (2, 3)


def test_reflectance_range():
    with pytest.raises(SceneSpecError):
        SceneSpec(kind="slant_edge", bright=1.5)


def test_sweeps():
    sweep = fixtures.exposure_sweep([0.1, 0.2], [2.0, 4.0, 8.0], [1.0, 2.0])
    assert len(sweep) == 12
    st = fixtures.stop_sweep(CameraSettings(), "aperture", 3)
    exposures = [s.exposure_time / s.aperture_number ** 2 for s in st]
    np.testing.assert_allclose(np.diff(np.log2(exposures)), 1.0, rtol=1e-12)
    assert len(fixtures.defocus_conditions()) == 25
