from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    Affine,
    BilinearUpsample,
    Conv2d,
    GlobalAvgPool,
    Layer,
    MaxPool2,
    Param,
    ReLU,
    Sequential,
    Sigmoid,
    align_corners_matrix,
    sigmoid,
)
from .loss import LossSpec, weighted_masked_bce, weighted_masked_bce_logits
from .optim import sgd_step

__all__ = [
    "Affine", "BilinearUpsample", "Conv2d", "GlobalAvgPool", "GradCheckReport", "Layer",
    "LossSpec", "MaxPool2", "Param", "ReLU", "Sequential", "Sigmoid", "align_corners_matrix",
    "grad_check", "load_into", "read_checkpoint", "save_checkpoint", "sgd_step", "sigmoid",
    "weighted_masked_bce", "weighted_masked_bce_logits",
]
