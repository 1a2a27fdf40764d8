"""Command-line front end: ``diffcam {render,calibrate,gradcheck,fixture,compare}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import calib, datasets, fixtures, grad, metrics
from ._parallel import get_threads, set_threads
from .blur import DepthError
from .imagecore import (
    RAW_MAX,
    CameraSettings,
    ImageFormatError,
    LayerToggles,
    ParamsError,
    SensorModelParams,
    load_params,
    load_pfm,
    load_raw16,
    load_roi,
    params_from_dict,
    save_params,
    save_pfm,
    save_raw16,
    save_roi,
)
from .pipeline import PRESETS, PipelineError, run_pipeline

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
LAYER_FLAGS = ("distortion", "vignetting", "defocus", "aggregator", "noise", "crf")


class InputError(ValueError):
    pass


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _load_image(path) -> np.ndarray:
    """PFM as-is, RAW16 scaled to ``[0, 1]``."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic in (b"PF", b"Pf"):
        img = load_pfm(path)
        return img if img.ndim == 3 else img[..., None]
    return load_raw16(path).astype(np.float64) / RAW_MAX


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc}") from None


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------
def _toggles(args) -> LayerToggles:
    t = PRESETS[args.preset] if args.preset else LayerToggles()
    changes = {name: getattr(args, name) for name in LAYER_FLAGS if getattr(args, name) is not None}
    if args.exposure_fallback is not None:
        changes["exposure_ratio_fallback"] = args.exposure_fallback
    if args.no_noise:
        changes["noise"] = False
    return replace(t, **changes)


def cmd_render(args) -> int:
    start = time.perf_counter()
    settings, params = load_params(args.params) if args.params else (CameraSettings(), SensorModelParams())
    radiance = load_pfm(args.radiance)
    depth = load_pfm(args.depth) if args.depth else None
    roi = load_roi(args.roi) if args.roi else None
    toggles = _toggles(args)
    dtype = np.float32 if args.precision == 32 else np.float64
    out = run_pipeline(radiance, depth, roi, settings, params, toggles, seed=args.seed, dtype=dtype,
                       threads=args.threads)
    save_raw16(out, args.out)
    manifest = {
        "command": "render",
        "inputs": {"radiance": args.radiance, "depth": args.depth, "roi": args.roi},
        "params": args.params,
        "toggles": asdict(toggles),
        "seed": args.seed,
        "precision": args.precision,
        "threads": args.threads,
        "outputs": [args.out],
        "wall_time_s": time.perf_counter() - start,
    }
    _write_json(args.out + ".json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------
def _base_params(path):
    if path and Path(path).exists():
        return load_params(path)
    return CameraSettings(), SensorModelParams()


def _image_entries(manifest):
    entries = manifest.get("images")
    if not isinstance(entries, list) or not entries:
        raise InputError("manifest needs a non-empty 'images' list")
    out = []
    for e in entries:
        if isinstance(e, str):
            e = {"path": e}
        settings = params_from_dict(e.get("settings", {}))[0]
        out.append((load_raw16(e["path"]), settings, e))
    return out


def _calibrate_vignetting(args, settings, params):
    if args.self_test:
        rig = datasets.VIGNETTE_RIG
        stack = datasets.flat_field_stack(args.true_value if args.true_value is not None else 0.7, count=4,
                                          noise_gain=1.0, read_sigma=10.0, seed=args.seed)
        res = calib.calibrate_vignetting(stack, rig)
    else:
        m = _read_json(args.manifest)
        items = _image_entries(m)
        res = calib.calibrate_vignetting([img for img, _, _ in items], items[0][1],
                                         black_level=float(m.get("black_level", 0.0)))
    return replace(params, vignetting_gain=res.coefficients["vignetting_gain"]), res.to_dict()


def _calibrate_defocus(args, settings, params):
    if args.self_test:
        truth = args.true_value if args.true_value is not None else 0.8
        conds, render, real, geo = datasets.defocus_self_test(truth, threads=args.threads)
    else:
        m = _read_json(args.manifest)
        rig = params_from_dict(m.get("settings", {}))[0] if "settings" in m else fixtures.DEFOCUS_RIG
        render = calib.edge_renderer(rig, size=int(m.get("size", 256)), tilt_deg=float(m.get("tilt_deg", 5.0)),
                                     threads=args.threads)
        conds = [(float(c["d"]), float(c["U"])) for c in m["conditions"]]
        real = [float(c["length_mm"]) for c in m["conditions"]]

        def geo(cond, rig=rig):
            return calib.edge_scan_geometry(rig, cond[0])

    res = calib.calibrate_defocus(conds, render, real, geo, rounds=args.rounds, early_stop=args.early_stop)
    return replace(params, defocus_gain=float(res.gain)), res.to_dict()


def _calibrate_exposure(args, settings, params):
    if args.self_test:
        probes, _, _ = datasets.exposure_probes(noise_sigma=50.0, seed=args.seed)
        K = 1.0
    else:
        m = _read_json(args.manifest)
        spec = fixtures.SceneSpec.from_dict(m["scene"])
        rad, _, _, regions = fixtures.gen_checker_grid(spec)
        R = fixtures.probe_means(rad, regions)
        K = float(m.get("K", 1.0))
        probes = []
        for img, s, _ in _image_entries(m):
            dv = fixtures.probe_means(img, regions)
            for p in range(len(regions)):
                for c in range(3):
                    probes.append(calib.ExposureProbe(s.aperture_number, s.exposure_time, s.iso, c,
                                                      float(dv[p, c]), float(R[p, c]), K))
    res = calib.calibrate_exposure(probes, rounds=args.rounds, early_stop=args.early_stop)
    return calib.exposure_to_params(res, settings, params, K), res.to_dict()


def _calibrate_noise(args, settings, params):
    if args.self_test:
        samples = datasets.noise_samples(seed=args.seed)
    else:
        m = _read_json(args.manifest)
        bias = float(m.get("bias", 0.0))
        samples = []
        for img, s, e in _image_entries(m):
            regions = e.get("regions") or [[0, img.shape[0], 0, img.shape[1]]]
            ch = int(e.get("channel", m.get("channel", 1)))
            for r0, r1, c0, c1 in regions:
                samples.append(calib.noise_sample(img[r0:r1, c0:c1, ch], iso=s.iso, bias=bias))
    res = calib.calibrate_noise(samples, crf_a=params.crf_a)
    co = res.coefficients
    return replace(params, noise_gain=co["noise_gain"], read_sigma=co["read_sigma"]), res.to_dict()


def _calibrate_gamma(args, settings, params):
    if args.self_test:
        kind = "gamma" if args.true_value not in (None, 1.0) else "linear"
        sweeps = datasets.gamma_sweeps(kind, args.true_value or 1.0)
    else:
        m = _read_json(args.manifest)
        spec = fixtures.SceneSpec.from_dict(m["scene"])
        regions = fixtures.gen_checker_grid(spec)[3]
        sweeps = []
        for sw in m["sweeps"]:
            dvs = [fixtures.probe_means(load_raw16(p), regions) for p in sw["images"]]
            sweeps.append(calib.GammaSweep(sw["factor"], np.array(dvs)))
    res = calib.estimate_gamma(sweeps)
    return replace(params, crf_gamma=float(res.gamma)), res.to_dict()


_CALIBRATORS = {
    "vignetting": _calibrate_vignetting,
    "defocus": _calibrate_defocus,
    "exposure": _calibrate_exposure,
    "noise": _calibrate_noise,
    "gamma": _calibrate_gamma,
}


def cmd_calibrate(args) -> int:
    if not args.self_test and not args.manifest:
        raise InputError("calibrate needs --manifest or --self-test")
    settings, params = _base_params(args.out_params)
    params, log = _CALIBRATORS[args.kind](args, settings, params)
    save_params(args.out_params, settings, params)
    print(json.dumps({"calibration": args.kind, "result": log}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / fixture / compare
# ---------------------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    layers = args.layers.split(",") if args.layers else grad.LAYERS
    unknown = [name for name in layers if name not in grad.LAYERS]
    if unknown:
        raise InputError(f"unknown layer(s): {', '.join(unknown)}")
    reports = grad.gradcheck(layers, trials=args.trials, tol=args.tol, seed=args.seed)
    text = grad.report_json(reports)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_fixture(args) -> int:
    spec = fixtures.SceneSpec.from_json(args.spec)
    prefix = args.out_prefix
    if spec.kind == "checker_grid":
        rad, depth, roi, regions = fixtures.gen_checker_grid(spec)
        _write_json(prefix + "_regions.json", [asdict(r) for r in regions])
    else:
        rad, depth, roi = fixtures.generate(spec)
    save_pfm(prefix + "_radiance.pfm", rad)
    save_pfm(prefix + "_depth.pfm", depth)
    save_roi(prefix + "_roi.pfm", roi)
    return EXIT_OK


def cmd_compare(args) -> int:
    pred = _load_image(args.pred)
    truth = _load_image(args.truth)
    roi = load_roi(args.roi) if args.roi else None
    report = metrics.compare(pred, truth, roi).to_dict()
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffcam", description="Differentiable camera simulator.")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: $DIFFCAM_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a 16-bit RAW image from radiance")
    r.add_argument("--radiance", required=True)
    r.add_argument("--depth")
    r.add_argument("--roi")
    r.add_argument("--params")
    r.add_argument("--out", required=True)
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--precision", type=int, choices=(32, 64), default=64)
    r.add_argument("--no-noise", action="store_true")
    for name in LAYER_FLAGS:
        r.add_argument(f"--{name}", type=_on_off, metavar="on|off")
    r.add_argument("--exposure-fallback", type=_on_off, metavar="on|off")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("calibrate", help="fit model parameters")
    c.add_argument("kind", choices=sorted(_CALIBRATORS))
    c.add_argument("--manifest")
    c.add_argument("--self-test", action="store_true", help="calibrate against a built-in synthetic dataset")
    c.add_argument("--true-value", type=float, help="generating value for --self-test")
    c.add_argument("--out-params", required=True)
    c.add_argument("--rounds", type=int, default=calib.DEFAULT_ROUNDS)
    c.add_argument("--early-stop", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_calibrate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer's VJP")
    g.add_argument("--layers", help=f"comma list from {','.join(grad.LAYERS)}")
    g.add_argument("--trials", type=int, default=10)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fixture", help="generate a synthetic target")
    f.add_argument("spec")
    f.add_argument("--out-prefix", required=True)
    f.set_defaults(func=cmd_fixture)

    m = sub.add_parser("compare", help="PSNR/SSIM over effective pixels")
    m.add_argument("pred")
    m.add_argument("truth")
    m.add_argument("--roi")
    m.add_argument("--out")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        set_threads(args.threads)
    args.threads = get_threads()
    try:
        return args.func(args)
    except calib.CalibrationError as exc:
        print(f"diffcam: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ParamsError, ImageFormatError, PipelineError, DepthError, fixtures.SceneSpecError,
            metrics.MetricError, OSError, KeyError, ValueError) as exc:
        msg = f"missing key {exc}" if isinstance(exc, KeyError) else str(exc)
        print(f"diffcam: error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
