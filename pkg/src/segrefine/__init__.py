"""Segmentation network with a multi-stage refinement context head, built
on a from-scratch numpy tensor/autodiff core."""

from .config import LossConfig, ModelConfig, RunConfig, TrainConfig
from .model import SegModel
from .refine import FeaturePyramid, FeatureRefineHead
from .tensor import Tensor

__all__ = [
    "LossConfig",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "SegModel",
    "FeaturePyramid",
    "FeatureRefineHead",
    "Tensor",
]
__version__ = "0.1.0"
