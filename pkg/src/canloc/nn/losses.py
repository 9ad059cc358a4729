"""Loss functions returning (scalar loss, gradient w.r.t. model output)."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .layers import NnError

_EPS = 1e-12

LOSSES = ("mse", "bce", "weighted_bce", "cce")


def _as_binary_targets(outputs: np.ndarray, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    return t


def mse(outputs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    t = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    diff = outputs - t
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def _bce_core(outputs, targets, weights_per_example):
    o = np.clip(outputs, _EPS, 1.0 - _EPS)
    t = _as_binary_targets(outputs, targets)
    n = outputs.shape[0]
    per = -(t * np.log(o) + (1.0 - t) * np.log(1.0 - o))
    w = weights_per_example
    loss = float(np.sum(w * per) / n)
    grad = w * (-(t / o) + (1.0 - t) / (1.0 - o)) / n
    grad = grad * ((outputs > _EPS) & (outputs < 1.0 - _EPS))
    return loss, grad


def bce(outputs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    return _bce_core(outputs, targets, np.float64(1.0))


def weighted_bce(
    outputs: np.ndarray, targets, class_weights
) -> tuple[float, np.ndarray]:
    """Cost-sensitive BCE: each example's term is scaled by its class weight."""
    if class_weights is None or len(class_weights) != 2:
        raise NnError("weighted_bce needs class_weights (w0, w1)")
    t = _as_binary_targets(outputs, targets)
    w = np.where(t > 0.5, float(class_weights[1]), float(class_weights[0]))
    return _bce_core(outputs, targets, w)


def cce(outputs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Categorical cross-entropy over probability rows (e.g. post-softmax).

    Targets may be integer class labels or one-hot rows.
    """
    t = np.asarray(targets)
    if t.ndim == 1:
        onehot = np.zeros_like(outputs)
        onehot[np.arange(len(t)), t.astype(int)] = 1.0
        t = onehot
    o = np.clip(outputs, _EPS, 1.0)
    n = outputs.shape[0]
    loss = float(-np.sum(t * np.log(o)) / n)
    grad = -(t / o) / n
    grad = grad * (outputs > _EPS)
    return loss, grad


def loss_and_grad(
    kind: str, outputs: np.ndarray, targets, class_weights: Optional[tuple] = None
) -> tuple[float, np.ndarray]:
    if kind == "mse":
        return mse(outputs, targets)
    if kind == "bce":
        return bce(outputs, targets)
    if kind == "weighted_bce":
        return weighted_bce(outputs, targets, class_weights)
    if kind == "cce":
        return cce(outputs, targets)
    raise NnError(f"unknown loss {kind!r}")
