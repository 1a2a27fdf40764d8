import json

import numpy as np
import pytest

from diffcam import _parallel
from diffcam.cli import main
from diffcam.imagecore import (
    CameraSettings,
    SensorModelParams,
    load_params,
    load_raw16,
    save_params,
    save_pfm,
    save_raw16,
)


@pytest.fixture(autouse=True)
def _reset_threads():
    yield
    _parallel.set_threads(None)


@pytest.fixture
def scene(tmp_path):
    rng = np.random.default_rng(0)
    rad = tmp_path / "rad.pfm"
    depth = tmp_path / "depth.pfm"
    params = tmp_path / "params.json"
    save_pfm(rad, rng.uniform(0, 1, (24, 28, 3)).astype(np.float32))
    save_pfm(depth, rng.uniform(0.3, 2.0, (24, 28)).astype(np.float32))
    save_params(params, CameraSettings(pixel_size=2e-5),
                SensorModelParams(aggregator_qe_rgb=(1e12,) * 3, read_sigma=2.0, crf_a=40.0))
    return rad, depth, params


def _render(tmp_path, scene, name, *extra):
    rad, depth, params = scene
    out = str(tmp_path / name)
    code = main([*extra[:2], "render", "--radiance", str(rad), "--depth", str(depth), "--params", str(params),
                 "--out", out, "--seed", "5", *extra[2:]])
    assert code == 0
    return out


def test_render_writes_raw_and_manifest(tmp_path, scene):
    out = _render(tmp_path, scene, "a.raw", "--threads", "2")
    img = load_raw16(out)
    assert img.shape == (24, 28, 3) and img.dtype == np.uint16
    man = json.loads(open(out + ".json").read())
    assert man["seed"] == 5 and man["threads"] == 2 and man["outputs"] == [out]
    assert man["toggles"]["defocus"] is True and man["wall_time_s"] >= 0


def test_render_thread_count_does_not_change_bytes(tmp_path, scene):
    a = _render(tmp_path, scene, "t1.raw", "--threads", "1")
    b = _render(tmp_path, scene, "t8.raw", "--threads", "8")
    assert open(a, "rb").read() == open(b, "rb").read()


def test_render_layer_flags(tmp_path, scene):
    a = _render(tmp_path, scene, "on.raw", "--threads", "1")
    b = _render(tmp_path, scene, "off.raw", "--threads", "1", "--defocus", "off", "--no-noise")
    man = json.loads(open(b + ".json").read())
    assert man["toggles"]["defocus"] is False and man["toggles"]["noise"] is False
    assert open(a, "rb").read() != open(b, "rb").read()


def test_render_defocus_without_depth_is_input_error(tmp_path, scene, capsys):
    rad, _, params = scene
    code = main(["render", "--radiance", str(rad), "--params", str(params), "--out", str(tmp_path / "x.raw")])
    assert code == 2
    assert "defocus requires depth" in capsys.readouterr().err


def test_fixture_and_compare(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "checker_grid", "height": 62, "width": 74}))
    prefix = str(tmp_path / "grid")
    assert main(["fixture", str(spec), "--out-prefix", prefix]) == 0
    regions = json.loads(open(prefix + "_regions.json").read())
    assert len(regions) == 120
    capsys.readouterr()
    out = tmp_path / "cmp.json"
    rad = prefix + "_radiance.pfm"
    assert main(["compare", rad, rad, "--roi", prefix + "_roi.pfm", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["inf"] is True and doc["ssim"] == pytest.approx(1.0)
    assert doc["effective_pixel_count"] == 3 * 62 * 74


def test_fixture_tilt_zero_is_input_error(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "slant_edge", "tilt_deg": 0}))
    assert main(["fixture", str(spec), "--out-prefix", str(tmp_path / "e")]) == 2


def test_compare_raw16_against_itself(tmp_path, capsys):
    path = tmp_path / "img.raw"
    save_raw16(np.random.default_rng(1).integers(0, 65535, (16, 16, 3), dtype=np.uint16), path)
    assert main(["compare", str(path), str(path)]) == 0
    assert json.loads(capsys.readouterr().out)["psnr"] is None


def test_gradcheck_exit_codes(tmp_path):
    out = tmp_path / "gc.json"
    assert main(["gradcheck", "--layers", "vignetting,crf_gamma", "--trials", "2", "--out", str(out)]) == 0
    assert [r["layer"] for r in json.loads(out.read_text())] == ["vignetting", "crf_gamma"]
    assert main(["gradcheck", "--layers", "defocus", "--trials", "1", "--tol", "1e-30"]) == 1
    assert main(["gradcheck", "--layers", "bogus"]) == 2


@pytest.mark.parametrize("kind,key,truth,tol", [
    ("vignetting", "vignetting_gain", 0.4, 0.01),
    ("noise", "noise_gain", 2.0, 0.1),
    ("gamma", "crf_gamma", 2.2, 0.05),
])
def test_calibrate_self_test_writes_params(tmp_path, capsys, kind, key, truth, tol):
    out = tmp_path / "p.json"
    save_params(out, CameraSettings(), SensorModelParams(k1=0.25))
    assert main(["calibrate", kind, "--self-test", "--true-value", str(truth), "--out-params", str(out)]) == 0
    _, params = load_params(out)
    assert abs(getattr(params, key) - truth) <= tol * max(1.0, truth)
    assert params.k1 == 0.25  # existing values are kept
    assert json.loads(capsys.readouterr().out)["calibration"] == kind


def test_calibrate_noise_manifest_too_few_means(tmp_path):
    img = tmp_path / "flat.raw"
    save_raw16(np.full((8, 8, 3), 1000, np.uint16), img)
    man = tmp_path / "m.json"
    man.write_text(json.dumps({"images": [str(img)]}))
    assert main(["calibrate", "noise", "--manifest", str(man), "--out-params", str(tmp_path / "p.json")]) == 3


def test_calibrate_needs_source(tmp_path):
    assert main(["calibrate", "gamma", "--out-params", str(tmp_path / "p.json")]) == 2
