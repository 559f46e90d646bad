"""Layers for the stain-normalizing network, each with exact reverse-mode grads.

All activations are NHWC float arrays. Layers cache what backward needs during
forward; backward consumes the cache and accumulates parameter gradients into
the layers' Tensors.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError, StaleCacheError
from .tensor import Tensor

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Layer:
    def params(self) -> list[Tensor]:
        return []

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StaleCacheError(f"{type(self).__name__}.backward before forward")
        self._cache = None
        return cache


class Conv2d(Layer):
    """3x3 (configurable) convolution with 'same' padding, stride 1 or 2."""

    def __init__(self, in_channels: int, out_channels: int, *, stride: int = 1,
                 kernel: int = 3, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "conv"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.kernel = kernel
        self.pad = kernel // 2
        rng = rng or np.random.default_rng(0)
        fan_in = kernel * kernel * in_channels
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, (kernel, kernel, in_channels, out_channels))
        self.weight = Tensor(w.astype(dtype), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), name=f"{name}.bias")
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def _out_size(self, size: int) -> int:
        return (size + 2 * self.pad - self.kernel) // self.stride + 1

    def forward(self, x, training):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeMismatchError(
                f"conv expects NHWC with C={self.in_channels}, got {x.shape}")
        k, s, p = self.kernel, self.stride, self.pad
        n, h, w, c = x.shape
        oh, ow = self._out_size(h), self._out_size(w)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="constant")
        cols = np.empty((n, oh, ow, k * k * c), dtype=x.dtype)
        slot = 0
        for ki in range(k):
            for kj in range(k):
                cols[..., slot * c:(slot + 1) * c] = \
                    xp[:, ki:ki + s * oh:s, kj:kj + s * ow:s, :]
                slot += 1
        wmat = self.weight.data.reshape(k * k * c, self.out_channels)
        y = cols.reshape(-1, k * k * c) @ wmat + self.bias.data
        self._cache = (cols, x.shape, xp.shape)
        return y.reshape(n, oh, ow, self.out_channels)

    def backward(self, dy):
        cols, x_shape, xp_shape = self._take_cache()
        k, s, p = self.kernel, self.stride, self.pad
        n, h, w, c = x_shape
        oh, ow = dy.shape[1], dy.shape[2]
        dy2 = dy.reshape(-1, self.out_channels)
        cols2 = cols.reshape(-1, k * k * c)
        self.weight.grad += (cols2.T @ dy2).reshape(self.weight.data.shape)
        self.bias.grad += dy2.sum(axis=0)
        wmat = self.weight.data.reshape(k * k * c, self.out_channels)
        dcols = (dy2 @ wmat.T).reshape(n, oh, ow, k * k * c)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        slot = 0
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki:ki + s * oh:s, kj:kj + s * ow:s, :] += \
                    dcols[..., slot * c:(slot + 1) * c]
                slot += 1
        return dxp[:, p:p + h, p:p + w, :]


class NearestUpsample2x(Layer):
    """Nearest-neighbor 2x spatial upsampling."""

    def __init__(self):
        self._cache = None

    def forward(self, x, training):
        self._cache = x.shape
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        n, h, w, c = self._take_cache()
        return dy.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (batch, height, width).

    Uses population (biased) variance for batch statistics and the running
    buffers so that train and eval modes agree when the running statistics
    equal the batch statistics.
    """

    def __init__(self, channels: int, *, momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS, dtype=np.float32, name: str = "bn"):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, training):
        if x.shape[3] != self.channels:
            raise ShapeMismatchError(f"bn expects C={self.channels}, got {x.shape}")
        axes = (0, 1, 2)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mean).astype(x.dtype)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var).astype(x.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, training)
        return self.gamma.data * xhat + self.beta.data

    def backward(self, dy):
        xhat, inv_std, training = self._take_cache()
        axes = (0, 1, 2)
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.data
        if not training:
            return dxhat * inv_std
        # batch statistics depend on x: full normalization gradient
        mean_dxhat = dxhat.mean(axis=axes)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
        return inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)


class LeakyReLU(Layer):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope
        self._cache = None

    def forward(self, x, training):
        mask = x > 0.0
        self._cache = mask
        return np.where(mask, x, self.slope * x)

    def backward(self, dy):
        mask = self._take_cache()
        return np.where(mask, dy, self.slope * dy)


class Tanh(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, training):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy * (1.0 - y * y)
