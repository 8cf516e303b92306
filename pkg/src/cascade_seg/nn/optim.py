from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from ..errors import ParamError, ShapeError
from .layers import Param


def sgd_step(params: Iterable[Param] | dict, lr: float, momentum: float = 0.0) -> None:
    """In-place momentum SGD: v <- momentum * v + g ; p <- p - lr * v."""
    if lr <= 0:
        raise ParamError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ParamError(f"momentum must lie in [0, 1), got {momentum}")
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"gradient {p.grad.shape} does not match parameter {p.value.shape}")
        dtype = p.value.dtype
        p.velocity[...] = (np.asarray(momentum, dtype) * p.velocity + p.grad).astype(dtype)
        p.value[...] = (p.value - np.asarray(lr, dtype) * p.velocity).astype(dtype)
