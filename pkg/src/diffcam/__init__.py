"""Differentiable physics-based camera simulation and calibration."""

from .imagecore import (
    CameraSettings,
    LayerToggles,
    SensorModelParams,
    load_params,
    load_pfm,
    load_raw16,
    save_params,
    save_pfm,
    save_raw16,
)
from .blur import BlurWeightMatrix, apply_blur, blur_diameters, build_blur_weights
from .noise import add_noise
from .pipeline import (
    PRESETS,
    aggregate,
    apply_crf,
    compute_fov,
    distort,
    forward,
    run_pipeline,
    vignette,
)

__version__ = "0.1.0"
