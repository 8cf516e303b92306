"""Layers with explicit forward/backward passes over NCHW float arrays.

Each layer caches what its backward pass needs during ``forward``; calling
``backward`` accumulates into the ``grad`` of its parameters and returns the
gradient with respect to the layer input.
"""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from ..errors import ShapeError


class Param:
    __slots__ = ("value", "grad", "velocity")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape


class Layer:
    """Base class: parameter-free identity."""

    def params(self) -> dict[str, Param]:
        return {}

    def forward(self, x):
        return x

    def backward(self, grad):
        return grad

    def zero_grad(self):
        for p in self.params().values():
            p.grad[...] = 0


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, pad=None,
                 rng=None, dtype=np.float32):
        if stride < 1:
            raise ShapeError("stride must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.pad = kernel_size // 2 if pad is None else pad
        if self.pad < 0:
            raise ShapeError("pad must be >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Param(he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                       fan_in, dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        p = self.pad
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        if xpad.shape[2] < self.k or xpad.shape[3] < self.k:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.k} with pad {p}")
        cols = kernels.im2col(xpad, self.k, self.k, self.stride)
        _, oh, ow = cols.shape[:3]
        cols2 = cols.reshape(n * oh * ow, -1)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        out = cols2 @ wmat.T + self.bias.value
        self._cache = (cols2, xpad.shape, (n, oh, ow))
        return np.ascontiguousarray(out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad):
        cols2, pad_shape, (n, oh, ow) = self._cache
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_channels)
        self.weight.grad += (g2.T @ cols2).reshape(self.weight.shape)
        self.bias.grad += g2.sum(axis=0)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        dcols = (g2 @ wmat).reshape(n, oh, ow, self.in_channels, self.k, self.k)
        dx = kernels.col2im(dcols, pad_shape, self.stride)
        p = self.pad
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dx)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        # subgradient 0 at x == 0
        return np.where(self._mask, grad, 0).astype(grad.dtype, copy=False)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        return grad * self._y * (1 - self._y)


def sigmoid(x):
    return np.exp(-np.logaddexp(0, -x)).astype(np.result_type(x, np.float32), copy=False)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        idx, (n, c, h, w) = self._cache
        g = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(g, idx[..., None], grad[..., None], axis=-1)
        g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return g.reshape(n, c, h, w)


def align_corners_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row o holds the bilinear weights of output sample o over the input samples."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1 - frac
    m[rows, lo + 1] += frac
    return m.astype(dtype)


class BilinearUpsample(Layer):
    """Align-corners bilinear upsampling by a fixed power-of-two factor."""

    def __init__(self, factor: int):
        if factor < 2 or factor & (factor - 1):
            raise ShapeError(f"upsample factor must be a power of two >= 2, got {factor}")
        self.factor = factor
        self._mats = {}

    def _matrices(self, h, w, dtype):
        key = (h, w, np.dtype(dtype).str)
        if key not in self._mats:
            f = self.factor
            self._mats[key] = (align_corners_matrix(h, h * f, dtype),
                               align_corners_matrix(w, w * f, dtype))
        return self._mats[key]

    def forward(self, x):
        uh, uw = self._matrices(x.shape[2], x.shape[3], x.dtype)
        self._cache = (uh, uw)
        return np.ascontiguousarray(uh @ x @ uw.T)

    def backward(self, grad):
        uh, uw = self._cache
        return np.ascontiguousarray(uh.T @ grad @ uw)


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to((grad / (h * w))[:, :, None, None], self._shape).astype(grad.dtype)


class Affine(Layer):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.weight = Param(he_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Param(np.zeros(out_features, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"affine expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


class Sequential(Layer):
    def __init__(self, **layers: Layer):
        self.layers = dict(layers)

    def params(self):
        out = {}
        for name, layer in self.layers.items():
            for pname, p in layer.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def forward(self, x):
        for layer in self.layers.values():
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.layers.values())):
            grad = layer.backward(grad)
        return grad
