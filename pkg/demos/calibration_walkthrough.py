"""Fit each calibration stage against synthetic data with known answers.

Pass ``--defocus`` to include the dropping-length iteration (about a minute).
"""

# %%
import sys

from diffcam import calib, datasets

# %% Vignetting: a flat field through cos^4 falloff at three strengths
for g in (0.3, 0.7, 1.0):
    res = calib.calibrate_vignetting(datasets.flat_field_stack(g), datasets.VIGNETTE_RIG)
    print(f"vignetting  true {g:.1f}  fitted {res.coefficients['vignetting_gain']:.4f}")

# %% Exposure: 216 settings x 120 patches x 3 channels, with 50 DV of probe noise
probes, truth, _ = datasets.exposure_probes(noise_sigma=50.0, seed=1)
res = calib.calibrate_exposure(probes)
for key in ("gain_rgb", "dark_rgb", "bias_rgb"):
    print(f"exposure    {key:9s} true {truth[key]}  fitted {[round(v, 1) for v in res.coefficients[key]]}")

# %% Noise: variance against mean over six grey patches
res = calib.calibrate_noise(datasets.noise_samples(noise_gain=2.0, read_sigma=50.0))
print(f"noise       G {res.coefficients['noise_gain']:.4f} (true 2)  "
      f"sigma_read {res.coefficients['read_sigma']:.2f} (true 50)")

# %% Response curve: log-log slopes of one-stop sweeps
for kind, gamma in (("linear", 1.0), ("gamma", 2.2)):
    res = calib.estimate_gamma(datasets.gamma_sweeps(kind, gamma))
    print(f"gamma       true {gamma}  estimated {res.gamma} (raw {res.gamma_raw:.4f})")

# %% Defocus: ratio updates on the 5 x 5 depth/focus grid
if "--defocus" in sys.argv:
    conds, render, real, geometry = datasets.defocus_self_test(0.8)
    res = calib.calibrate_defocus(conds, render, real, geometry)
    print("defocus     gain history", [round(g, 4) for g in res.history])
