"""Minimal dense-tensor engine: numpy kernels plus explicit-tape layers."""

from . import functional
from .layers import (
    AvgPool3d,
    BatchNorm3d,
    Conv3d,
    GlobalAvgPool,
    Linear,
    MaxPool3d,
    Module,
    Parameter,
    ReLU,
    Sequential,
)

__all__ = [
    "functional",
    "AvgPool3d",
    "BatchNorm3d",
    "Conv3d",
    "GlobalAvgPool",
    "Linear",
    "MaxPool3d",
    "Module",
    "Parameter",
    "ReLU",
    "Sequential",
]
