"""
Reverse-mode gradients with respect to the input radiance, and a
finite-difference checker.

Every deterministic layer is linear in its input except the gamma and
sigmoid response curves, so most VJPs are a fixed scaling or a sparse
transpose.  Noise is treated as an additive sample held fixed, and
quantization/clamping as straight-through (identity inside ``[0, 65535]``,
zero outside).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .blur import BlurWeightMatrix, build_blur_weights
from .imagecore import RAW_MAX, CameraSettings, LayerToggles, SensorModelParams
from .pipeline import (
    CRF_EPS,
    PipelineState,
    aggregate,
    aggregator_gain,
    apply_crf,
    distort,
    distortion_matrix,
    forward,
    vignette,
    vignette_factor,
)


def _check_shape(cot, shape):
    cot = np.asarray(cot)
    if cot.shape != tuple(shape):
        raise ValueError(f"cotangent shape {cot.shape} does not match forward output {tuple(shape)}")
    return cot


def vjp_distort(cot, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    cot = np.asarray(cot)
    H, W = cot.shape[:2]
    m = distortion_matrix(cot.shape, settings, params)
    return (m.T @ cot.reshape(H * W, -1)).reshape(cot.shape)


def vjp_vignette(cot, settings: CameraSettings, params: SensorModelParams, shape=None) -> np.ndarray:
    cot = _check_shape(cot, shape if shape is not None else np.shape(cot))
    return cot * vignette_factor(cot.shape, settings, params)[..., None]


def vjp_blur(cot, weights: BlurWeightMatrix) -> np.ndarray:
    return weights.apply_transpose(cot)


def vjp_aggregate(cot, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    return np.asarray(cot) * aggregator_gain(settings, params)


def crf_derivative(x, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    """Pointwise slope of the continuous response, with straight-through clamping."""
    x = np.asarray(x, dtype=np.float64)
    iso, a = settings.iso, params.crf_a
    b = np.asarray(params.crf_b_rgb, dtype=np.float64)
    if params.crf_kind == "linear":
        y = a * iso * x + b
        slope = np.full_like(x, a * iso)
    elif params.crf_kind == "gamma":
        arg = np.maximum(a * iso * x, CRF_EPS)
        y = arg ** params.crf_gamma
        slope = params.crf_gamma * arg ** (params.crf_gamma - 1.0) * a * iso
    else:
        xc = np.maximum(iso * x, CRF_EPS) / iso
        s = 1.0 / (1.0 + np.exp(-a * np.log2(iso * xc) - b))
        y = RAW_MAX * s
        slope = RAW_MAX * s * (1.0 - s) * a / (math.log(2.0) * xc)
    return np.where((y >= 0) & (y <= RAW_MAX), slope, 0.0)


def vjp_crf(cot, forward_input, settings: CameraSettings, params: SensorModelParams) -> np.ndarray:
    cot = _check_shape(cot, np.shape(forward_input))
    return cot * crf_derivative(forward_input, settings, params)


def vjp_pipeline(cot, state: PipelineState, toggles: LayerToggles | None = None) -> np.ndarray:
    """Gradient of ``<cot, forward(x)>`` with respect to the input radiance."""
    if state is None or state.output is None:
        raise ValueError("forward state missing; run pipeline.forward first")
    toggles = state.toggles if toggles is None else toggles
    g = np.array(_check_shape(cot, state.shape), dtype=np.float64)
    # straight-through: clamp at the 16-bit range blocks the gradient
    if toggles.crf:
        g = vjp_crf(g, state.crf_input, state.settings, state.params)
    else:
        pre = state.pre_clip
        g = np.where((pre >= 0) & (pre <= RAW_MAX), g, 0.0)
    if toggles.exposure_ratio_fallback and not toggles.aggregator and not toggles.crf:
        g = g * state.fallback_scale
    if toggles.aggregator:
        g = g * state.aggregator
    if toggles.defocus:
        g = vjp_blur(g, state.blur)
    if state.roi is not None:
        g = g * state.roi[..., None]
    if toggles.vignetting:
        g = g * state.vignette[..., None]
    if toggles.distortion:
        H, W = state.shape[:2]
        g = (state.distortion.T @ g.reshape(H * W, -1)).reshape(state.shape)
    return g


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------
@dataclass
class LayerReport:
    layer: str
    trials: int
    max_rel_err: float
    passed: bool

    def to_dict(self) -> dict:
        return {"layer": self.layer, "trials": self.trials,
                "max_rel_err": self.max_rel_err, "pass": self.passed}


def fd_gradient(fun, x: np.ndarray, u: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences of ``L(x) = <u, fun(x)>``, step ``rel_step * max(1, |x_i|)``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        h = rel_step * max(1.0, abs(flat[i]))
        old = flat[i]
        flat[i] = old + h
        lp = math.fsum((u * fun(x)).ravel())
        flat[i] = old - h
        lm = math.fsum((u * fun(x)).ravel())
        flat[i] = old
        gflat[i] = (lp - lm) / (2.0 * h)
    return g


def relative_error(analytic, numeric) -> float:
    """Max-norm error relative to the largest gradient component."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), np.finfo(float).tiny)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_vjp(fun, vjp, x, u, rel_step: float = 1e-6) -> float:
    return relative_error(vjp(u), fd_gradient(fun, x, u, rel_step))


def _random_settings(rng) -> CameraSettings:
    return CameraSettings(
        aperture_number=float(rng.uniform(1.4, 4.0)),
        exposure_time=float(rng.uniform(0.05, 0.5)),
        iso=float(rng.uniform(1.0, 4.0)),
        focus_distance=float(rng.uniform(0.5, 2.0)),
        focal_length=0.005,
        pixel_size=float(rng.uniform(20e-6, 60e-6)),
        sensor_width=0.0064,
        scene_illumination=float(rng.uniform(0.5, 2.0)),
    )


# keeps every response inside the 16-bit range for inputs up to ~10
_CRF_A_RANGE = {"linear": (50.0, 200.0), "gamma": (1.0, 3.0), "sigmoid": (0.5, 2.0)}


def _random_params(rng, settings: CameraSettings, crf_kind="linear") -> SensorModelParams:
    # aggregator scaled so energy is O(1) for O(1) radiance
    unit = 1.0 / float(aggregator_gain(settings, SensorModelParams())[0])
    return SensorModelParams(
        k1=float(rng.uniform(-0.3, 0.3)), k2=float(rng.uniform(-0.1, 0.1)), k3=0.0,
        vignetting_gain=float(rng.uniform(0.2, 1.0)),
        defocus_gain=1.0,
        aggregator_qe_rgb=tuple(unit * rng.uniform(0.5, 1.5, 3)),
        dark_current=float(rng.uniform(0.0, 0.5)),
        crf_kind=crf_kind,
        crf_a=float(rng.uniform(*_CRF_A_RANGE[crf_kind])),
        crf_b_rgb=tuple(rng.uniform(0.0, 100.0, 3)) if crf_kind != "sigmoid" else tuple(rng.uniform(-1, 1, 3)),
        crf_gamma=float(rng.uniform(0.4, 2.5)),
        noise_gain=0.0, read_sigma=0.0,
    )


def _random_blur(rng, shape) -> BlurWeightMatrix:
    return build_blur_weights(rng.uniform(0.0, 7.0, shape[:2]))


LAYERS = ("distortion", "vignetting", "defocus", "aggregator",
          "crf_linear", "crf_gamma", "crf_sigmoid", "pipeline")


def _layer_problem(layer: str, rng, shape):
    """Return ``(fun, vjp, x)`` for one random instance of ``layer``."""
    settings = _random_settings(rng)
    x = rng.uniform(0.1, 1.0, shape)
    if layer == "distortion":
        p = _random_params(rng, settings)
        return (lambda z: distort(z, settings, p)), (lambda u: vjp_distort(u, settings, p)), x
    if layer == "vignetting":
        p = _random_params(rng, settings)
        return (lambda z: vignette(z, settings, p)), (lambda u: vjp_vignette(u, settings, p)), x
    if layer == "defocus":
        w = _random_blur(rng, shape)
        return w.apply, (lambda u: vjp_blur(u, w)), x
    if layer == "aggregator":
        p = _random_params(rng, settings)
        return (lambda z: aggregate(z, settings, p)), (lambda u: vjp_aggregate(u, settings, p)), x
    if layer.startswith("crf_"):
        p = _random_params(rng, settings, crf_kind=layer[4:])
        if p.crf_kind == "sigmoid":
            x = rng.uniform(0.5, 50.0, shape)
        return ((lambda z: apply_crf(z, settings, p, quantized=False)),
                (lambda u: vjp_crf(u, x, settings, p)), x)
    if layer == "pipeline":
        p = _random_params(rng, settings, crf_kind=str(rng.choice(["linear", "gamma"])))
        w = _random_blur(rng, shape)
        roi = rng.random(shape[:2]) > 0.1
        toggles = LayerToggles(distortion=True, vignetting=True, defocus=True, aggregator=True,
                               noise=False, crf=True)
        if p.crf_kind == "gamma":
            p = replace(p, crf_gamma=float(rng.uniform(1.0, 2.0)))

        def fun(z):
            return forward(z, None, roi, settings, p, toggles, blur_weights=w)[0]

        _, state = forward(x, None, roi, settings, p, toggles, blur_weights=w)
        return fun, (lambda u: vjp_pipeline(u, state)), x
    raise ValueError(f"unknown layer {layer!r}; expected one of {LAYERS}")


def gradcheck(layers=LAYERS, trials: int = 10, tol: float = 1e-5, shape=(16, 16, 3),
              seed: int = 0) -> list[LayerReport]:
    """Compare analytic VJPs with central differences on random inputs."""
    reports = []
    for layer in layers:
        rng = np.random.default_rng([seed, LAYERS.index(layer) if layer in LAYERS else 99])
        worst = 0.0
        for _ in range(trials):
            fun, vjp, x = _layer_problem(layer, rng, shape)
            u = rng.standard_normal(shape)
            worst = max(worst, check_vjp(fun, vjp, x, u))
        reports.append(LayerReport(layer, trials, worst, worst < tol))
    return reports


def report_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)
