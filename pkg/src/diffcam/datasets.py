"""
Ready-made synthetic calibration datasets.

Each builder renders fixture scenes through the forward model with known
parameters and returns the measurements a calibration routine consumes,
together with the ground truth used to generate them.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .calib import (
    ExposureProbe,
    GammaSweep,
    dropping_length_table,
    edge_renderer,
    edge_scan_geometry,
    noise_sample,
)
from .fixtures import (
    DEFOCUS_RIG,
    SceneSpec,
    defocus_conditions,
    exposure_sweep,
    gen_checker_grid,
    gen_flat_field,
    probe_means,
    stop_sweep,
)
from .imagecore import CameraSettings, LayerToggles, SensorModelParams
from .noise import add_noise
from .pipeline import aggregator_gain, forward, quantize, run_pipeline

CHECKER_SPEC = SceneSpec(kind="checker_grid", height=62, width=74)
EXPOSURE_TIMES = (1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2)
EXPOSURE_APERTURES = (1.4, 2.0, 2.8, 4.0, 5.6, 8.0)
EXPOSURE_ISOS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)

_EXPOSURE_TOGGLES = replace(LayerToggles.all_off(), aggregator=True, noise=True, crf=True)


def _unit_qe(settings: CameraSettings) -> float:
    """QE making the aggregator output ``t R / N^2`` (so K = 1 in DV space)."""
    return 1.0 / (settings.scene_illumination * settings.pixel_size ** 2)


# ---------------------------------------------------------------------------
def exposure_truth(settings: CameraSettings | None = None):
    """Generating coefficients in DV space and the matching model parameters."""
    settings = settings or CameraSettings()
    gain = np.array([18000.0, 21000.0, 15000.0])
    dark = 150.0
    bias = np.array([500.0, 700.0, 900.0])
    unit = _unit_qe(settings)
    params = SensorModelParams(aggregator_qe_rgb=tuple(unit * gain), dark_current=dark, crf_kind="linear",
                               crf_a=1.0, crf_b_rgb=tuple(bias), noise_gain=0.0, read_sigma=0.0)
    return {"gain_rgb": gain, "dark_rgb": np.full(3, dark), "bias_rgb": bias}, params


def exposure_probes(noise_sigma: float = 0.0, seed: int = 0, settings: CameraSettings | None = None,
                    spec: SceneSpec = CHECKER_SPEC):
    """Probe set over the full ``t x N x ISO`` sweep (216 settings, 120 patches).

    Probe DVs are continuous (unrounded) patch means; ``noise_sigma`` adds
    independent Gaussian DV noise to each probe.
    """
    base = settings or CameraSettings()
    truth, params = exposure_truth(base)
    rad, _, roi, regions = gen_checker_grid(spec)
    R = probe_means(rad, regions)
    rng = np.random.default_rng(seed)
    probes = []
    for s in exposure_sweep(EXPOSURE_TIMES, EXPOSURE_APERTURES, EXPOSURE_ISOS, base):
        out, _ = forward(rad, None, roi, s, params, _EXPOSURE_TOGGLES)
        dv = probe_means(out, regions)
        if noise_sigma:
            dv = np.clip(dv + noise_sigma * rng.standard_normal(dv.shape), 0.0, 65535.0)
        for p in range(len(regions)):
            for c in range(3):
                probes.append(ExposureProbe(s.aperture_number, s.exposure_time, s.iso, c,
                                            float(dv[p, c]), float(R[p, c])))
    return probes, truth, params


# ---------------------------------------------------------------------------
NOISE_MEANS = (500.0, 2000.0, 5000.0, 10000.0, 20000.0, 40000.0)


def noise_samples(noise_gain: float = 2.0, read_sigma: float = 50.0, pixels: int = 100_000,
                  means=NOISE_MEANS, seed: int = 0, settings: CameraSettings | None = None):
    """One grayscale patch per mean level through the noise model and 16-bit rounding."""
    settings = settings or CameraSettings()
    params = SensorModelParams(noise_gain=noise_gain, read_sigma=read_sigma)
    out = []
    for k, mu in enumerate(means):
        patch = np.full((pixels, 1, 1), float(mu))
        dv = quantize(add_noise(patch, settings, params, seed=seed * 1000 + k))
        out.append(noise_sample(dv, iso=settings.iso, bias=0.0))
    return out


# ---------------------------------------------------------------------------
VIGNETTE_RIG = CameraSettings(pixel_size=40e-6, sensor_width=128 * 40e-6)


def flat_field_stack(vignetting_gain: float, count: int = 1, size: int = 128, level: float = 40000.0,
                     noise_gain: float = 0.0, read_sigma: float = 0.0, seed: int = 0,
                     settings: CameraSettings = VIGNETTE_RIG):
    """Flat-field DV images at centre level ``level``."""
    rad, _, roi = gen_flat_field(SceneSpec(height=size, width=size, level=1.0))
    qe = level / float(aggregator_gain(settings, SensorModelParams())[0])
    params = SensorModelParams(vignetting_gain=vignetting_gain, aggregator_qe_rgb=(qe,) * 3,
                               noise_gain=noise_gain, read_sigma=read_sigma)
    toggles = replace(LayerToggles.all_off(), vignetting=True, aggregator=True, crf=True,
                      noise=bool(noise_gain or read_sigma))
    return [run_pipeline(rad, None, roi, settings, params, toggles, seed=seed + k) for k in range(count)]


# ---------------------------------------------------------------------------
def gamma_sweeps(crf_kind: str = "linear", gamma: float = 1.0, steps: int = 7,
                 settings: CameraSettings | None = None, spec: SceneSpec = CHECKER_SPEC):
    """One-stop sweeps of ``t``, ``ISO`` and aperture through a linear or gamma response.

    The linear camera carries a small bias, so its log-slopes sit slightly
    below one, as on real hardware.
    """
    base = replace(settings or CameraSettings(), exposure_time=1 / 64, aperture_number=8.0)
    unit = _unit_qe(base)
    if crf_kind == "linear":
        params = SensorModelParams(aggregator_qe_rgb=(unit,) * 3, crf_kind="linear", crf_a=2e6,
                                   crf_b_rgb=(8.0, 10.0, 6.0))
    else:
        params = SensorModelParams(aggregator_qe_rgb=(unit,) * 3, crf_kind="gamma", crf_a=66000.0,
                                   crf_gamma=gamma)
    rad, _, roi, regions = gen_checker_grid(spec)
    toggles = replace(LayerToggles.all_off(), aggregator=True, crf=True)
    sweeps = []
    for factor in ("t", "iso", "aperture"):
        dvs = [probe_means(run_pipeline(rad, None, roi, s, params, toggles), regions)
               for s in stop_sweep(base, factor, steps)]
        sweeps.append(GammaSweep(factor, np.array(dvs)))
    return sweeps


# ---------------------------------------------------------------------------
def defocus_self_test(true_gain: float = 0.8, size: int = 256, threads=None):
    """``(conditions, render, real_lengths, geometry_fn)`` on the 5 x 5 depth grid."""
    render = edge_renderer(DEFOCUS_RIG, size=size, threads=threads)
    conditions = defocus_conditions()

    def geometry(cond):
        return edge_scan_geometry(DEFOCUS_RIG, cond[0])

    real = dropping_length_table(render, conditions, true_gain, geometry)
    return conditions, render, real, geometry


__all__ = [
    "exposure_truth", "exposure_probes", "noise_samples", "flat_field_stack", "gamma_sweeps",
    "defocus_self_test", "CHECKER_SPEC", "VIGNETTE_RIG",
]
