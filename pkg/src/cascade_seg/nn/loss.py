"""Class-balanced binary cross-entropy with an optional support mask.

    L(y, p) = -(1 - w) * y * log(p) - w * (1 - y) * log(1 - p)

averaged over the voxels where the mask is 1. Gradients are exactly +0.0
wherever the mask is 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateMask, ParamError, ShapeError
from .layers import sigmoid

EPS = 1e-7


@dataclass(frozen=True)
class LossSpec:
    w: float | np.ndarray = 0.5
    mask: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if not np.all((w > 0) & (w < 1)):
            raise ParamError(f"class weight must lie in (0, 1), got {self.w}")


def _support(pred, target, spec: LossSpec):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if spec.mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        if spec.mask.shape != pred.shape:
            raise ShapeError(f"mask {spec.mask.shape} does not match prediction {pred.shape}")
        mask = spec.mask.astype(bool)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateMask("loss mask has no support")
    return mask, count


def _loss_value(p, y, w, mask, count):
    p = np.clip(p.astype(np.float64), EPS, 1 - EPS)
    y = y.astype(np.float64)
    per_voxel = -(1 - w) * y * np.log(p) - w * (1 - y) * np.log1p(-p)
    return float(np.where(mask, per_voxel, 0.0).sum() / count)


def weighted_masked_bce(pred, target, spec: LossSpec):
    """Loss and gradient with respect to the probabilities ``pred``."""
    mask, count = _support(pred, target, spec)
    w = np.asarray(spec.w, dtype=np.float64)
    loss = _loss_value(pred, target, w, mask, count)
    p = pred.astype(np.float64)
    inside = (p > EPS) & (p < 1 - EPS)
    y = target.astype(np.float64)
    g = (-(1 - w) * y / np.clip(p, EPS, 1) + w * (1 - y) / np.clip(1 - p, EPS, 1)) / count
    grad = np.where(mask & inside, g, 0.0)
    return loss, grad.astype(pred.dtype)


def weighted_masked_bce_logits(logits, target, spec: LossSpec):
    """Same loss evaluated on ``sigmoid(logits)``; gradient with respect to the logits.

    The gradient uses the closed form (((1-w)y + w(1-y)) p - (1-w) y) / count,
    which avoids dividing by saturated probabilities.
    """
    mask, count = _support(logits, target, spec)
    w = np.asarray(spec.w, dtype=np.float64)
    p = sigmoid(logits.astype(np.float64))
    loss = _loss_value(p, target, w, mask, count)
    y = target.astype(np.float64)
    g = (((1 - w) * y + w * (1 - y)) * p - (1 - w) * y) / count
    grad = np.where(mask, g, 0.0)
    return loss, grad.astype(logits.dtype)
