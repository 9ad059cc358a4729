"""Mini-batch training with chronological validation and early stopping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..rng import substream
from .layers import NnError
from .losses import LOSSES, loss_and_grad
from .model import Sequential
from .optim import make_optimizer


class TrainingError(NnError):
    """Dataset or configuration unusable for training."""


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    loss: str = "mse"
    batch_size: int = 32
    max_epochs: int = 200
    val_fraction: float = 0.30
    class_weights: Optional[tuple[float, float]] = None
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")
        if self.loss not in LOSSES:
            raise TrainingError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise TrainingError("val_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise TrainingError("invalid batch size / epochs / patience")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch] if self.val_loss else float("nan")


def _eval_loss(model: Sequential, x, y, cfg: TrainConfig) -> float:
    out = model.predict(x)
    loss, _ = loss_and_grad(cfg.loss, out, y, cfg.class_weights)
    return loss


def train(
    model: Sequential,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    x_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
) -> TrainHistory:
    """Train in place; data must already be in chronological order.

    When no explicit validation set is supplied, the last val_fraction of
    the dataset is held out chronologically. Training stops at the minimum
    validation loss (with patience) and the best-epoch parameters are
    restored.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise TrainingError("empty dataset")
    if len(x) != len(y):
        raise TrainingError("inputs and targets differ in length")

    if x_val is None:
        n_val = int(round(cfg.val_fraction * len(x)))
        if n_val > 0:
            x, x_val = x[:-n_val], x[-n_val:]
            y, y_val = y[:-n_val], y[-n_val:]
    if len(x) < cfg.batch_size:
        raise TrainingError(
            f"training set ({len(x)}) smaller than one batch ({cfg.batch_size})"
        )
    has_val = x_val is not None and len(x_val) > 0

    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    shuffle_rng = substream(cfg.seed, "shuffle")
    history = TrainHistory()
    best_val = float("inf")
    best_snap = None
    wait = 0

    for epoch in range(cfg.max_epochs):
        perm = shuffle_rng.permutation(len(x))
        epoch_losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            model.zero_grads()
            out = model.forward(x[idx], training=True)
            loss, grad = loss_and_grad(cfg.loss, out, y[idx], cfg.class_weights)
            model.backward(grad)
            optimizer.step(model.params())
            epoch_losses.append(loss)
        history.train_loss.append(float(np.mean(epoch_losses)))

        if has_val:
            vloss = _eval_loss(model, x_val, y_val, cfg)
            history.val_loss.append(vloss)
            if vloss < best_val - 1e-12:
                best_val = vloss
                best_snap = model.snapshot()
                history.best_epoch = epoch
                wait = 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    break

    history.stopped_epoch = len(history.train_loss) - 1
    if best_snap is not None:
        model.restore(best_snap)
    elif has_val:
        history.best_epoch = history.stopped_epoch
    return history
