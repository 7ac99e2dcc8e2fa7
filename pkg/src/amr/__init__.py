"""Rotation-robust classification via angle prediction and derotation.

The pipeline: a frozen base CNN classifies an input's in-plane rotation
through a small add-on head fed by five feature taps, the input is rotated
back by the negative predicted angle, and the base classifies the
corrected image. Includes the training loops, per-angle evaluation sweeps,
breakpoint analysis, and tap-gate ablations needed to measure it.
"""

__version__ = "0.1.0"

from .geometry import (
    ImagePlane,
    apply_circular_mask,
    make_rotated_example,
    rotate_image,
)
from .models import (
    AmrConfig,
    BaseConfig,
    TapBundle,
    build_amr_head,
    build_base,
    classify_with_amr,
    forward_base,
    predict_angle,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_amr, train_base

__all__ = [
    "ImagePlane",
    "apply_circular_mask",
    "make_rotated_example",
    "rotate_image",
    "AmrConfig",
    "BaseConfig",
    "TapBundle",
    "build_amr_head",
    "build_base",
    "classify_with_amr",
    "forward_base",
    "predict_angle",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train_amr",
    "train_base",
    "__version__",
]
