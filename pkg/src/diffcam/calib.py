"""
Calibration procedures for the camera model.

All five fits work on plain arrays of digital values, so the same code
runs on rendered fixtures and on photographs loaded from disk:

* vignetting gain from an averaged flat field,
* defocus gain from slant-edge dropping lengths (90% to 10% width),
* aggregator / dark current / bias from exposure sweeps,
* shot and read noise from patch means and variances,
* the response exponent from one-stop exposure sweeps.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .imagecore import RAW_MAX, CameraSettings, LayerToggles, SensorModelParams, pixel_coordinates

SATURATION_FRACTION = 0.95
DEFAULT_ROUNDS = 3
EARLY_STOP = 0.01


class CalibrationError(ValueError):
    """Degenerate or unusable calibration data."""


@dataclass
class RegressionResult:
    coefficients: dict
    rss: float
    n_samples: int
    rounds: int = 1
    flags: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, (list, tuple, np.ndarray)):
                return [clean(x) for x in v]
            v = float(v)
            return v if math.isfinite(v) else None

        return {"coefficients": {k: clean(v) for k, v in self.coefficients.items()},
                "rss": float(self.rss), "n_samples": int(self.n_samples), "rounds": self.rounds,
                "flags": list(self.flags), "history": [clean(h) for h in self.history]}


def zero_intercept_regress(xs, ys) -> float:
    """Least-squares slope of ``y = m x``: ``sum(xy) / sum(x^2)``."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.shape != ys.shape:
        raise CalibrationError("xs and ys differ in length")
    sxx = math.fsum(xs * xs)
    if sxx == 0.0:
        raise CalibrationError("zero-intercept regression needs a nonzero x")
    return math.fsum(xs * ys) / sxx


def _gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


# ---------------------------------------------------------------------------
# Vignetting
# ---------------------------------------------------------------------------
def cos4_falloff(shape, settings: CameraSettings) -> np.ndarray:
    """``1 - cos^4(theta)`` per pixel."""
    a, b = pixel_coordinates(shape, settings.pixel_size)
    f2 = settings.focal_length ** 2
    cos2 = f2 / (f2 + a * a + b * b)
    return 1.0 - cos2 * cos2


def calibrate_vignetting(stack, settings: CameraSettings, black_level: float = 0.0,
                         center_fraction: float = 0.05) -> RegressionResult:
    """Fit ``G_vignet`` from one or more flat-field DV images.

    The stack is averaged, the unvignetted level is the mean inside a
    central disc of radius ``center_fraction`` of the half-diagonal, and
    ``1 - y/x`` is regressed through the origin on ``1 - cos^4 theta``.
    """
    stack = [np.asarray(s, dtype=np.float64) for s in (stack if isinstance(stack, (list, tuple)) else [stack])]
    if not stack:
        raise CalibrationError("need at least one flat-field image")
    if any(np.any(s >= SATURATION_FRACTION * RAW_MAX) for s in stack):
        raise CalibrationError("saturated flat field")
    y = np.mean([_gray(s) for s in stack], axis=0) - black_level
    H, W = y.shape
    ii, jj = np.mgrid[0:H, 0:W]
    rr = np.hypot(ii - (H - 1) / 2.0, jj - (W - 1) / 2.0)
    disc = rr <= max(center_fraction * np.hypot(H - 1, W - 1) / 2.0, 0.5)
    x_ref = y[disc].mean()
    if not x_ref > 0:
        raise CalibrationError("flat-field centre is not above the black level")
    g = zero_intercept_regress(cos4_falloff((H, W), settings), 1.0 - y / x_ref)
    flags = []
    if not 0.0 <= g <= 1.0:
        flags.append(f"slope {g:.4g} clamped to [0, 1]")
    g_c = min(max(g, 0.0), 1.0)
    resid = (1.0 - y / x_ref) - g * cos4_falloff((H, W), settings)
    return RegressionResult({"vignetting_gain": g_c, "raw_slope": g}, float(math.fsum((resid * resid).ravel())),
                            y.size, flags=flags)


# ---------------------------------------------------------------------------
# Dropping length
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ScanGeometry:
    """Sample spacing along each row in mm, and pixels to skip at each border.

    Margins keep the measurement clear of the image boundary, where a
    clipped blur window piles energy back into the frame.
    """

    mm_per_pixel: float = 1.0
    row_margin: int = 0
    col_margin: int = 0


@dataclass
class StepResponse:
    positions: np.ndarray  # mm, 50% crossing at 0
    values: np.ndarray     # falls from ~1 to ~0


def _crossings(v, level):
    """Fractional indices where ``v`` passes through ``level`` going down."""
    above = v >= level
    k = np.flatnonzero(above[:-1] & ~above[1:])
    t = (v[k] - level) / (v[k] - v[k + 1])
    return k + t


def step_response(edge_image, geometry: ScanGeometry = ScanGeometry(), resolution: float = 0.05) -> StepResponse:
    """Row-normalized, 50%-aligned, row-averaged edge profile.

    Rows are oriented bright-to-dark.  Each row's 50% crossing (linear
    interpolation) becomes the origin; rows are resampled on a common grid
    of ``resolution`` pixels and averaged.
    """
    img = _gray(edge_image)
    m, n = int(geometry.row_margin), int(geometry.col_margin)
    rows = img[m:img.shape[0] - m, n:img.shape[1] - n]
    if rows.shape[0] < 1 or rows.shape[1] < 3:
        raise CalibrationError("edge image too small")
    lo = rows.min(axis=1, keepdims=True)
    span = rows.max(axis=1, keepdims=True) - lo
    if np.any(span <= 0):
        raise CalibrationError("no crossing found: flat row in edge image")
    v = (rows - lo) / span
    half = v.shape[1] // 2
    if v[:, :half].mean() < v[:, half:].mean():
        v = v[:, ::-1]
    x = np.arange(v.shape[1], dtype=np.float64)
    shifted = []
    for row in v:
        c = _crossings(row, 0.5)
        if c.size == 0:
            raise CalibrationError("no crossing found in edge row")
        # for a falling 1->0 profile, sum(row) - 0.5 estimates the edge
        guess = row.sum() - 0.5
        shifted.append((x - c[np.argmin(np.abs(c - guess))], row))
    lo_p = max(s[0][0] for s in shifted)
    hi_p = min(s[0][-1] for s in shifted)
    grid = np.arange(math.ceil(lo_p / resolution), math.floor(hi_p / resolution) + 1) * resolution
    prof = np.mean([np.interp(grid, p, r) for p, r in shifted], axis=0)
    return StepResponse(grid * geometry.mm_per_pixel, prof)


def dropping_length(edge_image, geometry: ScanGeometry = ScanGeometry(), resolution: float = 0.05) -> float:
    """Distance in mm over which the averaged edge falls from 90% to 10%."""
    sr = step_response(edge_image, geometry, resolution)
    return response_width(sr)


def response_width(sr: StepResponse, hi: float = 0.9, lo: float = 0.1) -> float:
    p, v = sr.positions, sr.values
    c = int(np.searchsorted(p, 0.0))
    left = np.flatnonzero(v[:c] >= hi)
    right = np.flatnonzero(v[c:] <= lo)
    if left.size == 0 or right.size == 0:
        raise CalibrationError("no crossing found: profile does not span 90% to 10%")
    i = left[-1]
    j = c + right[0]
    p_hi = p[i] + (v[i] - hi) / (v[i] - v[i + 1]) * (p[i + 1] - p[i])
    p_lo = p[j - 1] + (v[j - 1] - lo) / (v[j - 1] - v[j]) * (p[j] - p[j - 1])
    return float(p_lo - p_hi)


# ---------------------------------------------------------------------------
# Defocus gain
# ---------------------------------------------------------------------------
@dataclass
class DefocusResult:
    gain: float
    history: list
    ratios: list
    synthetic_lengths: list
    used: list

    def to_dict(self) -> dict:
        return {"defocus_gain": self.gain, "history": self.history,
                "ratios": self.ratios, "used_conditions": self.used}


def edge_scan_geometry(settings: CameraSettings, depth: float, row_margin: int = 16,
                       col_margin: int = 24) -> ScanGeometry:
    """Object-plane sample spacing for an edge at ``depth``: ``C d / f`` (mm)."""
    return ScanGeometry(1000.0 * settings.pixel_size * depth / settings.focal_length, row_margin, col_margin)


def edge_renderer(rig: CameraSettings | None = None, size: int = 256, tilt_deg: float = 5.0,
                  level: float = 60000.0, params: SensorModelParams | None = None, threads=None):
    """``render(gain, (d, U))`` drawing a slant edge through the defocus layer only."""
    from .fixtures import DEFOCUS_RIG, SceneSpec, gen_slant_edge
    from .pipeline import run_pipeline

    rig = rig or DEFOCUS_RIG
    params = params or SensorModelParams()
    toggles = replace(LayerToggles.all_off(), defocus=True)

    def render(gain, condition):
        d, U = condition
        spec = SceneSpec(kind="slant_edge", height=size, width=size, depth=d, level=level, tilt_deg=tilt_deg)
        rad, depth, roi = gen_slant_edge(spec)
        s = replace(rig, focus_distance=U)
        p = replace(params, defocus_gain=float(gain))
        return run_pipeline(rad, depth, roi, s, p, toggles, threads=threads)

    return render


def dropping_length_table(render, conditions, gain, geometry_fn, in_focus_zero: bool = True) -> np.ndarray:
    """Dropping length (mm) per ``(d, U)``; in-focus conditions report 0."""
    out = []
    for cond in conditions:
        if in_focus_zero and cond[0] == cond[1]:
            out.append(0.0)
        else:
            out.append(dropping_length(render(gain, cond), geometry_fn(cond)))
    return np.array(out)


def calibrate_defocus(conditions, render, real_lengths, geometry_fn, initial_gain: float = 1.0,
                      rounds: int = DEFAULT_ROUNDS, early_stop: bool = False,
                      measure=None) -> DefocusResult:
    """Iterate ``G <- G * mean(real / synthetic)`` over the dropping-length table.

    In-focus conditions (``d == U``) carry no blur information and are left
    out of the mean.  ``measure(image, geometry)`` defaults to
    :func:`dropping_length`.
    """
    measure = measure or dropping_length
    real = np.asarray(real_lengths, dtype=np.float64)
    if real.size != len(conditions):
        raise CalibrationError("one real length per condition is required")
    used = [k for k, (d, U) in enumerate(conditions) if d != U]
    if not used:
        raise CalibrationError("no out-of-focus conditions")
    gain = float(initial_gain)
    history = [gain]
    ratios = []
    synth = []
    for _ in range(rounds):
        lengths = np.array([measure(render(gain, conditions[k]), geometry_fn(conditions[k])) for k in used])
        if np.any(lengths <= 0):
            raise CalibrationError("zero synthetic dropping length")
        r = real[used] / lengths
        synth.append(lengths.tolist())
        ratios.append(r.tolist())
        factor = math.fsum(r) / r.size
        gain *= factor
        history.append(gain)
        if early_stop and abs(factor - 1.0) < EARLY_STOP:
            break
    return DefocusResult(gain, history, ratios, synth, used)


# ---------------------------------------------------------------------------
# Exposure
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ExposureProbe:
    aperture_number: float
    exposure_time: float
    iso: float
    channel: int
    real_dv: float
    radiance: float
    K: float = 1.0
    synth_dv: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.real_dv <= RAW_MAX:
            raise CalibrationError(f"probe DV {self.real_dv} outside [0, {RAW_MAX}]")


def exposure_features(N, t, iso, R, K=1.0) -> np.ndarray:
    """Design matrix columns ``[ISO t K R / N^2, ISO t, 1]``."""
    N, t, iso, R = (np.asarray(v, dtype=np.float64) for v in (N, t, iso, R))
    it = iso * t
    return np.column_stack([it * K * R / (N * N), it, np.ones_like(it)])


def _fit_columns(X, y, names):
    """Least squares with column scaling; returns ``(coef, flags)``."""
    flags = []
    coef = np.full(X.shape[1], np.nan)
    keep = np.array([np.any(X[:, j] != 0) for j in range(X.shape[1])])
    for j in np.flatnonzero(~keep):
        flags.append(f"{names[j]} undetermined (feature is identically zero)")
    Xk = X[:, keep]
    scale = np.sqrt((Xk * Xk).sum(axis=0))
    Xs = Xk / scale
    if np.linalg.matrix_rank(Xs) < Xs.shape[1] or Xs.shape[0] < Xs.shape[1]:
        raise CalibrationError("rank-deficient design matrix: probes do not vary enough in (N, t, ISO)")
    sol, *_ = np.linalg.lstsq(Xs, y, rcond=None)
    coef[keep] = sol / scale
    return coef, flags


def calibrate_exposure(probes, rounds: int = DEFAULT_ROUNDS, early_stop: bool = False,
                       render=None) -> RegressionResult:
    """Per-channel regression of probe DVs on exposure features.

    Coefficients are ``gain_rgb`` (aggregator times QE, in DV per unit of
    ``ISO t K R / N^2``), ``dark_rgb`` (DV per unit ``ISO t``) and
    ``bias_rgb``.  Each round refits on unsaturated probes and re-renders
    the synthetic DVs; ``render(coefficients)`` may replace the analytic
    re-render and must return one DV per probe.
    """
    probes = list(probes)
    if not probes:
        raise CalibrationError("no exposure probes")
    N = np.array([p.aperture_number for p in probes])
    t = np.array([p.exposure_time for p in probes])
    iso = np.array([p.iso for p in probes])
    R = np.array([p.radiance for p in probes])
    K = np.array([p.K for p in probes])
    ch = np.array([p.channel for p in probes], dtype=int)
    real = np.array([p.real_dv for p in probes])
    X = exposure_features(N, t, iso, R, K)
    unsat = real < SATURATION_FRACTION * RAW_MAX
    channels = sorted(set(ch.tolist()))
    names = ("gain", "dark", "bias")
    coefs = {c: np.full(3, np.nan) for c in range(3)}
    flags = []
    synth = np.full(real.shape, np.nan)
    history = []
    rss = 0.0
    n_used = 0
    done = 0
    for _ in range(max(1, rounds)):
        done += 1
        prev = {c: v.copy() for c, v in coefs.items()}
        rss = 0.0
        n_used = 0
        round_flags = []
        for c in channels:
            sel = (ch == c) & unsat & (np.isnan(synth) | (synth < SATURATION_FRACTION * RAW_MAX))
            if sel.sum() < 3:
                raise CalibrationError(f"channel {c}: fewer than 3 unsaturated probes")
            coef, fl = _fit_columns(X[sel], real[sel], names)
            round_flags += [f"channel {c}: {m}" for m in fl]
            coefs[c] = coef
            pred = X[sel] @ np.nan_to_num(coef)
            rss += math.fsum((real[sel] - pred) ** 2)
            n_used += int(sel.sum())
        flags = round_flags
        if render is not None:
            synth = np.asarray(render(_exposure_coeffs(coefs)), dtype=np.float64)
        else:
            synth = np.clip(np.einsum("ij,ij->i", X, np.nan_to_num(np.array([coefs[c] for c in ch]))), 0, RAW_MAX)
        history.append(_exposure_coeffs(coefs))
        if early_stop and done > 1 and _max_rel_change(prev, coefs) < EARLY_STOP:
            break
    return RegressionResult(_exposure_coeffs(coefs), rss, n_used, rounds=done, flags=flags,
                            history=[[h["gain_rgb"], h["dark_rgb"], h["bias_rgb"]] for h in history])


def _exposure_coeffs(coefs) -> dict:
    return {"gain_rgb": [float(coefs[c][0]) for c in range(3)],
            "dark_rgb": [float(coefs[c][1]) for c in range(3)],
            "bias_rgb": [float(coefs[c][2]) for c in range(3)]}


def _max_rel_change(a, b) -> float:
    worst = 0.0
    for c in a:
        x, y = a[c], b[c]
        ok = np.isfinite(x) & np.isfinite(y) & (x != 0)
        if ok.any():
            worst = max(worst, float(np.max(np.abs((y[ok] - x[ok]) / x[ok]))))
        elif np.any(np.isfinite(y)):
            worst = math.inf
    return worst


def exposure_to_params(result: RegressionResult, settings: CameraSettings, params: SensorModelParams,
                       K: float = 1.0) -> SensorModelParams:
    """Translate fitted DV-domain coefficients into linear-CRF model parameters.

    With a linear response ``a ISO x + b``: ``gain = a QE L C^2 / K``,
    ``dark = a D_dark``.  The dark current is averaged over channels.
    """
    co = result.coefficients
    a = params.crf_a
    scale = a * settings.scene_illumination * settings.pixel_size ** 2 / K
    gains = np.asarray(co["gain_rgb"], dtype=float)
    qe = tuple(float(g / scale) if math.isfinite(g) else q for g, q in zip(gains, params.aggregator_qe_rgb))
    dark = np.asarray(co["dark_rgb"], dtype=float)
    return replace(params, aggregator_qe_rgb=qe, dark_current=max(float(np.nanmean(dark)) / a, 0.0),
                   crf_b_rgb=tuple(float(b) for b in co["bias_rgb"]), crf_kind="linear")


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseCalibSample:
    mean_dv: float
    var_dv: float
    iso: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        if not self.var_dv >= 0:
            raise CalibrationError("variance must be >= 0")


def noise_sample(pixels, iso: float = 1.0, bias: float = 0.0) -> NoiseCalibSample:
    """Mean and (population) variance of one uniform patch."""
    v = np.asarray(pixels, dtype=np.float64).ravel()
    return NoiseCalibSample(float(v.mean()), float(v.var()), iso, bias)


def calibrate_noise(samples, crf_a: float = 1.0) -> RegressionResult:
    """Regress ``V/ISO^2`` on ``(E - b)/ISO``: slope ``a G^2``, intercept ``a^2 sigma^2``."""
    samples = list(samples)
    means = [s.mean_dv for s in samples]
    if len(set(means)) < 2:
        raise CalibrationError("noise calibration needs at least 2 samples with distinct means")
    x = np.array([(s.mean_dv - s.bias) / s.iso for s in samples])
    y = np.array([s.var_dv / s.iso ** 2 for s in samples])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    flags = []
    if slope < 0:
        flags.append("negative slope clamped to 0")
        slope = 0.0
    if intercept < 0:
        flags.append("negative intercept clamped to 0")
        warnings.warn("noise regression intercept negative; read noise set to 0", stacklevel=2)
        intercept = 0.0
    resid = y - (slope * x + intercept)
    return RegressionResult({"noise_gain": math.sqrt(slope / crf_a), "read_sigma": math.sqrt(intercept) / crf_a,
                             "slope": float(slope), "intercept": float(intercept)},
                            float(math.fsum(resid * resid)), len(samples), flags=flags)


# ---------------------------------------------------------------------------
# Gamma
# ---------------------------------------------------------------------------
GAMMA_BIN = 0.05
SWEEP_FACTORS = ("t", "iso", "aperture")


@dataclass
class GammaSweep:
    """DVs of fixed probes while one exposure factor doubles per step.

    ``dv`` has shape ``(steps, probes, channels)``.
    """

    factor: str
    dv: np.ndarray

    def __post_init__(self):
        if self.factor not in SWEEP_FACTORS:
            raise CalibrationError(f"sweep factor must be one of {SWEEP_FACTORS}")
        self.dv = np.asarray(self.dv, dtype=np.float64)
        if self.dv.ndim == 2:
            self.dv = self.dv[..., None]
        if self.dv.ndim != 3 or self.dv.shape[0] < 2:
            raise CalibrationError("sweep needs at least 2 steps, shape (steps, probes, channels)")


@dataclass
class GammaResult:
    gamma: float
    gamma_raw: float
    per_sweep: list

    def to_dict(self) -> dict:
        return {"crf_gamma": self.gamma, "gamma_raw": self.gamma_raw, "per_sweep": self.per_sweep}


def segment_slopes(dv) -> np.ndarray:
    """``log2`` DV increments between consecutive unsaturated steps."""
    dv = np.asarray(dv, dtype=np.float64)
    ok = (dv >= 1.0) & (dv <= SATURATION_FRACTION * RAW_MAX)
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.log2(np.where(ok, dv, 1.0))
    pair = ok[1:] & ok[:-1]
    return (lg[1:] - lg[:-1])[pair]


def mode_slope(slopes, width: float = GAMMA_BIN) -> float:
    """Mean slope within the two most populated histogram bins.

    The lowest occupied bin holds near-saturation segments and is dropped
    whenever any other bin is occupied.
    """
    s = np.asarray(slopes, dtype=np.float64)
    if s.size == 0:
        raise CalibrationError("no unsaturated segments")
    bins = np.floor(s / width + 1e-9).astype(np.int64)
    counts = Counter(bins.tolist())
    if len(counts) > 1:
        del counts[min(counts)]
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:2]
    chosen = np.isin(bins, [b for b, _ in ranked])
    return math.fsum(s[chosen]) / int(chosen.sum())


def estimate_gamma(sweeps, include_aperture: bool = False) -> GammaResult:
    """Average mode slope over channels and non-aperture sweeps, rounded to 0.1."""
    per = []
    for k, sw in enumerate(sweeps):
        if sw.factor == "aperture" and not include_aperture:
            continue
        for c in range(sw.dv.shape[2]):
            sl = segment_slopes(sw.dv[:, :, c])
            if sl.size == 0:
                continue
            per.append({"sweep": k, "factor": sw.factor, "channel": c, "slope": mode_slope(sl)})
    if not per:
        raise CalibrationError("all probes saturated: no usable exposure segments")
    raw = math.fsum(p["slope"] for p in per) / len(per)
    return GammaResult(round(raw, 1), raw, per)
