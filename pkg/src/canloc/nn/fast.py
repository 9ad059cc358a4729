"""Compiled single-example inference path.

Per-frame runtime work is a handful of skinny matrix products, where the
float64 training layers spend most of their time on memory traffic. This
module pre-casts weights to float32, folds batch normalization into one
scale-and-shift, lowers convolutions to a single GEMM over a preallocated
window buffer, and skips dropout, which keeps one authentication call
within the real-time frame budget. Training, gradients and stored model
files stay float64.

A FastInference instance reuses internal scratch buffers, so one instance
must not be shared across threads; build one per thread instead.
"""
from __future__ import annotations

import numpy as np

from .layers import LEAKY_SLOPE, Activation, BatchNorm, Conv1D, Dense, Dropout, MaxPool1D
from .model import Sequential


def _act_fn(name: str):
    if name == "relu":
        return lambda x: np.maximum(x, 0.0, out=x)
    if name == "leaky_relu":
        return lambda x: np.where(x > 0, x, np.float32(LEAKY_SLOPE) * x)
    if name == "sigmoid":
        return lambda x: 1.0 / (1.0 + np.exp(-x))
    if name == "softmax":

        def softmax(x):
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

        return softmax
    return lambda x: x


class FastInference:
    """Single-input float32 forward pass over a trained Sequential."""

    def __init__(self, model: Sequential):
        self.input_shape = model.input_shape
        self._ops = []
        shape = model.input_shape
        for layer in model.layers:
            if isinstance(layer, Dense):
                # Column-major streams measurably faster through sgemv here.
                w = np.asfortranarray(layer.w.value, dtype=np.float32)
                b = layer.b.value.astype(np.float32)
                self._ops.append(("dense", (w, b)))
                shape = (layer.spec.units,)
            elif isinstance(layer, Conv1D):
                length, cin = shape
                k, cout = layer.spec.kernel_size, layer.spec.filters
                b = layer.b.value.astype(np.float32)
                pad = np.zeros((length + k - 1, cin), dtype=np.float32)
                if cin * k <= 8:
                    # Narrow input: one small GEMM over a window buffer
                    # (rows ordered (k, cin) to match the copies below).
                    wk = np.ascontiguousarray(
                        layer.w.value.transpose(1, 0, 2).reshape(k * cin, cout),
                        dtype=np.float32,
                    )
                    col = np.empty((length, k * cin), dtype=np.float32)
                    self._ops.append(("conv_col", (wk, b, k, layer._pl, pad, col)))
                else:
                    # Wide input: accumulate k shifted GEMMs in place.
                    per_k = [
                        np.ascontiguousarray(layer.w.value[:, j, :], dtype=np.float32)
                        for j in range(k)
                    ]
                    acc = np.empty((length, cout), dtype=np.float32)
                    tmp = np.empty((length, cout), dtype=np.float32)
                    self._ops.append(("conv_acc", (per_k, b, k, layer._pl, pad, acc, tmp)))
                shape = (length, cout)
            elif isinstance(layer, MaxPool1D):
                self._ops.append(("pool", layer.spec.pool_size))
                shape = (shape[0] // layer.spec.pool_size, shape[1])
            elif isinstance(layer, BatchNorm):
                inv = 1.0 / np.sqrt(layer.run_var + BatchNorm.EPS)
                scale = (layer.gamma.value * inv).astype(np.float32)
                shift = (
                    layer.beta.value - layer.run_mean * layer.gamma.value * inv
                ).astype(np.float32)
                self._ops.append(("affine", (scale, shift)))
            elif isinstance(layer, Dropout):
                continue  # identity at inference
            elif isinstance(layer, Activation):
                self._ops.append(("act", _act_fn(layer.spec.activation)))
            else:  # pragma: no cover - layer set is closed
                raise TypeError(f"unsupported layer {type(layer).__name__}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Run one example (shape == model input shape), returns float32."""
        x = np.asarray(x, dtype=np.float32).reshape(self.input_shape)
        if x.ndim == 1:
            x = x[:, None]
        for op, arg in self._ops:
            if op == "dense":
                w, b = arg
                x = x.reshape(-1) @ w
                x += b
            elif op == "conv_col":
                wk, b, k, pl, pad, col = arg
                length = pad.shape[0] - k + 1
                pad[pl : pl + length] = x
                cin = pad.shape[1]
                for j in range(k):
                    col[:, j * cin : (j + 1) * cin] = pad[j : j + length]
                x = col @ wk
                x += b
            elif op == "conv_acc":
                per_k, b, k, pl, pad, acc, tmp = arg
                length = acc.shape[0]
                pad[pl : pl + length] = x
                np.matmul(pad[0:length], per_k[0], out=acc)
                for j in range(1, k):
                    np.matmul(pad[j : j + length], per_k[j], out=tmp)
                    acc += tmp
                acc += b
                x = acc
            elif op == "pool":
                p = arg
                lo = x.shape[0] // p
                acc = np.array(x[0 : lo * p : p])
                for j in range(1, p):
                    np.maximum(acc, x[j : lo * p : p], out=acc)
                x = acc
            elif op == "affine":
                scale, shift = arg
                x = x * scale + shift
            else:  # activation
                x = arg(x)
        out = np.asarray(x, dtype=np.float32).reshape(-1)
        return np.array(out)  # detach from scratch buffers

    def predict(self, xs: np.ndarray) -> np.ndarray:
        """Convenience loop over a batch of examples."""
        return np.stack([self(x) for x in np.asarray(xs)])
