"""Minimal float64 neural layers with reference-grade gradients.

Data layout is (batch, features) for dense inputs and (batch, length,
channels) for 1-D convolutional inputs. Convolutions are stride 1 with
zero same-padding; pooling is non-overlapping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NnError(Exception):
    """Invalid layer configuration, shape or usage."""


class Param:
    """A trainable array together with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "softmax", "linear")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description used to build and serialize models."""

    kind: str
    units: Optional[int] = None
    filters: Optional[int] = None
    kernel_size: Optional[int] = None
    pool_size: Optional[int] = None
    rate: Optional[float] = None
    activation: Optional[str] = None

    def __post_init__(self):
        k = self.kind
        if k == "dense":
            if not self.units or self.units < 1:
                raise NnError("dense layer needs units >= 1")
        elif k == "conv1d":
            if not self.filters or self.filters < 1:
                raise NnError("conv1d layer needs filters >= 1")
            if not self.kernel_size or self.kernel_size < 1:
                raise NnError("conv1d kernel size must be >= 1")
        elif k == "maxpool1d":
            if not self.pool_size or self.pool_size < 1:
                raise NnError("pool size must be >= 1")
        elif k == "dropout":
            if self.rate is None or not 0.0 <= self.rate < 1.0:
                raise NnError("dropout rate must lie in [0, 1)")
        elif k == "activation":
            if self.activation not in ACTIVATIONS:
                raise NnError(f"unknown activation {self.activation!r}")
        elif k != "batchnorm":
            raise NnError(f"unknown layer kind {k!r}")

    def config(self) -> dict:
        out = {"kind": self.kind}
        for f in ("units", "filters", "kernel_size", "pool_size", "rate", "activation"):
            v = getattr(self, f)
            if v is not None:
                out[f] = v
        return out


class Layer:
    spec: LayerSpec

    def build(self, in_shape: tuple, rng: np.random.Generator) -> tuple:
        raise NotImplementedError

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def state_arrays(self) -> list[np.ndarray]:
        return [p.value for p in self.params()]

    def load_state(self, arrays: Sequence[np.ndarray]):
        own = self.state_arrays()
        if len(arrays) != len(own):
            raise NnError("state array count mismatch")
        for tgt, src in zip(own, arrays):
            if tgt.shape != src.shape:
                raise NnError(f"state shape mismatch {tgt.shape} vs {src.shape}")
            tgt[...] = src


class Dense(Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.w: Param
        self.b: Param

    def build(self, in_shape, rng):
        fan_in = int(np.prod(in_shape))
        self.w = Param(_he_uniform(rng, (fan_in, self.spec.units), fan_in))
        self.b = Param(np.zeros(self.spec.units))
        return (self.spec.units,)

    def forward(self, x, training=False, rng=None):
        self._in_shape = x.shape
        self._x2 = x.reshape(x.shape[0], -1)
        if self._x2.shape[1] != self.w.value.shape[0]:
            raise NnError(
                f"dense input width {self._x2.shape[1]} != {self.w.value.shape[0]}"
            )
        return self._x2 @ self.w.value + self.b.value

    def backward(self, dy):
        self.w.grad += self._x2.T @ dy
        self.b.grad += dy.sum(axis=0)
        return (dy @ self.w.value.T).reshape(self._in_shape)

    def params(self):
        return [self.w, self.b]


class Conv1D(Layer):
    """Stride-1 zero-padded ("same") 1-D convolution, weights (Cin, K, Cout)."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.w: Param
        self.b: Param

    def build(self, in_shape, rng):
        if len(in_shape) != 2:
            raise NnError("conv1d expects (length, channels) input")
        length, cin = in_shape
        k, cout = self.spec.kernel_size, self.spec.filters
        self.w = Param(_he_uniform(rng, (cin, k, cout), cin * k))
        self.b = Param(np.zeros(cout))
        self._pl = (k - 1) // 2
        self._pr = k - 1 - self._pl
        return (length, cout)

    def forward(self, x, training=False, rng=None):
        bsz, length, cin = x.shape
        k, cout = self.spec.kernel_size, self.spec.filters
        if cin != self.w.value.shape[0]:
            raise NnError(f"conv1d input channels {cin} != {self.w.value.shape[0]}")
        xp = np.pad(x, ((0, 0), (self._pl, self._pr), (0, 0)))
        # (B, L, Cin, K) -> (B*L, Cin*K); weight flattens the same way.
        col = sliding_window_view(xp, k, axis=1).reshape(bsz * length, cin * k)
        self._col = col
        self._in_dims = (bsz, length, cin)
        y = col @ self.w.value.reshape(cin * k, cout)
        return y.reshape(bsz, length, cout) + self.b.value

    def backward(self, dy):
        bsz, length, cin = self._in_dims
        k, cout = self.spec.kernel_size, self.spec.filters
        dy2 = dy.reshape(bsz * length, cout)
        self.w.grad += (self._col.T @ dy2).reshape(cin, k, cout)
        self.b.grad += dy2.sum(axis=0)
        # Full correlation of dy with the kernel flipped along K.
        dyp = np.pad(dy, ((0, 0), (k - 1, k - 1), (0, 0)))
        col_dy = sliding_window_view(dyp, k, axis=1).reshape(bsz * (length + k - 1), cout * k)
        wback = self.w.value[:, ::-1, :].transpose(2, 1, 0).reshape(cout * k, cin)
        dxp = (col_dy @ wback).reshape(bsz, length + k - 1, cin)
        return dxp[:, self._pl : self._pl + length, :]

    def params(self):
        return [self.w, self.b]


class MaxPool1D(Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def build(self, in_shape, rng):
        if len(in_shape) != 2:
            raise NnError("maxpool1d expects (length, channels) input")
        length, ch = in_shape
        return (length // self.spec.pool_size, ch)

    def forward(self, x, training=False, rng=None):
        p = self.spec.pool_size
        bsz, length, ch = x.shape
        lo = length // p
        self._in_dims = (bsz, length, ch)
        win = x[:, : lo * p, :].reshape(bsz, lo, p, ch)
        self._argmax = win.argmax(axis=2)
        return win.max(axis=2)

    def backward(self, dy):
        p = self.spec.pool_size
        bsz, length, ch = self._in_dims
        lo = length // p
        dwin = np.zeros((bsz, lo, p, ch))
        np.put_along_axis(dwin, self._argmax[:, :, None, :], dy[:, :, None, :], axis=2)
        dx = np.zeros((bsz, length, ch))
        dx[:, : lo * p, :] = dwin.reshape(bsz, lo * p, ch)
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization (last axis), 0.9 running momentum."""

    MOMENTUM = 0.9
    EPS = 1e-5

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.gamma: Param
        self.beta: Param

    def build(self, in_shape, rng):
        ch = in_shape[-1]
        self.gamma = Param(np.ones(ch))
        self.beta = Param(np.zeros(ch))
        self.run_mean = np.zeros(ch)
        self.run_var = np.ones(ch)
        self._axes = tuple(range(len(in_shape)))  # batch plus any length axis
        return in_shape

    def forward(self, x, training=False, rng=None):
        if training:
            mean = x.mean(axis=self._axes)
            var = x.var(axis=self._axes)
            self.run_mean *= self.MOMENTUM
            self.run_mean += (1 - self.MOMENTUM) * mean
            self.run_var *= self.MOMENTUM
            self.run_var += (1 - self.MOMENTUM) * var
            self._inv_std = 1.0 / np.sqrt(var + self.EPS)
            self._xhat = (x - mean) * self._inv_std
            self._n = x.size // x.shape[-1]
            return self.gamma.value * self._xhat + self.beta.value
        return (
            self.gamma.value * (x - self.run_mean) / np.sqrt(self.run_var + self.EPS)
            + self.beta.value
        )

    def backward(self, dy):
        self.gamma.grad += (dy * self._xhat).sum(axis=self._axes)
        self.beta.grad += dy.sum(axis=self._axes)
        dxhat = dy * self.gamma.value
        n = self._n
        s1 = dxhat.sum(axis=self._axes)
        s2 = (dxhat * self._xhat).sum(axis=self._axes)
        return (self._inv_std / n) * (n * dxhat - s1 - self._xhat * s2)

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [self.gamma.value, self.beta.value, self.run_mean, self.run_var]


class Dropout(Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def build(self, in_shape, rng):
        return in_shape

    def forward(self, x, training=False, rng=None):
        if not training or self.spec.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise NnError("dropout needs an rng in training mode")
        keep = 1.0 - self.spec.rate
        self._mask = (rng.random(x.shape) >= self.spec.rate) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Activation(Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def build(self, in_shape, rng):
        return in_shape

    def forward(self, x, training=False, rng=None):
        name = self.spec.activation
        if name == "relu":
            self._cache = x > 0
            return x * self._cache
        if name == "leaky_relu":
            self._cache = np.where(x > 0, 1.0, LEAKY_SLOPE)
            return x * self._cache
        if name == "sigmoid":
            y = np.empty_like(x)
            pos = x >= 0
            y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            y[~pos] = ex / (1.0 + ex)
            self._cache = y
            return y
        if name == "softmax":
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            y = e / e.sum(axis=-1, keepdims=True)
            self._cache = y
            return y
        return x  # linear

    def backward(self, dy):
        name = self.spec.activation
        if name in ("relu", "leaky_relu"):
            return dy * self._cache
        if name == "sigmoid":
            y = self._cache
            return dy * y * (1.0 - y)
        if name == "softmax":
            y = self._cache
            return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
        return dy


_LAYER_CLASSES = {
    "dense": Dense,
    "conv1d": Conv1D,
    "maxpool1d": MaxPool1D,
    "batchnorm": BatchNorm,
    "dropout": Dropout,
    "activation": Activation,
}


def make_layer(spec: LayerSpec) -> Layer:
    return _LAYER_CLASSES[spec.kind](spec)
