"""Sequential model container: build, forward/backward, snapshots."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..rng import substream
from .layers import Layer, LayerSpec, NnError, Param, make_layer


class Sequential:
    """A stack of layers built for a fixed input shape and seed.

    Weight initialization and dropout draw from named substreams of the
    seed, so two models built the same way are bitwise identical.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple, seed: int = 0):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        self.layers: list[Layer] = [make_layer(s) for s in self.specs]
        init_rng = substream(self.seed, "init")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, init_rng)
        self.output_shape = shape
        self._dropout_rng = substream(self.seed, "dropout")

    def forward(
        self, x: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise NnError(f"input shape {x.shape[1:]} != expected {self.input_shape}")
        if training and rng is None:
            rng = self._dropout_rng
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grads(self):
        for p in self.params():
            p.grad[...] = 0.0

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        outs = [
            self.forward(x[i : i + batch_size], training=False)
            for i in range(0, len(x), batch_size)
        ]
        return np.concatenate(outs, axis=0)

    def state_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.state_arrays())
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for a in self.state_arrays()]

    def restore(self, snap: Sequence[np.ndarray]):
        own = self.state_arrays()
        if len(snap) != len(own):
            raise NnError("snapshot layout mismatch")
        for tgt, src in zip(own, snap):
            tgt[...] = src


def build_model(specs: Sequence[LayerSpec], input_shape, seed: int = 0) -> Sequential:
    return Sequential(specs, input_shape, seed)
