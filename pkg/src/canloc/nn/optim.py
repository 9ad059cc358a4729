"""Adam and RMSProp with the standard published update rules."""
from __future__ import annotations

import numpy as np

from .layers import NnError, Param


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise NnError("learning rate must be positive")
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params: list[Param]):
        self.t += 1
        for p in params:
            key = id(p)
            m = self._m.setdefault(key, np.zeros_like(p.value))
            v = self._v.setdefault(key, np.zeros_like(p.value))
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class RMSProp:
    def __init__(self, lr: float, rho=0.9, eps=1e-8):
        if lr <= 0:
            raise NnError("learning rate must be positive")
        self.lr, self.rho, self.eps = lr, rho, eps
        self._acc: dict[int, np.ndarray] = {}

    def step(self, params: list[Param]):
        for p in params:
            acc = self._acc.setdefault(id(p), np.zeros_like(p.value))
            g = p.grad
            acc *= self.rho
            acc += (1 - self.rho) * g * g
            p.value -= self.lr * g / (np.sqrt(acc) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "rmsprop":
        return RMSProp(lr)
    raise NnError(f"unknown optimizer {name!r}")
