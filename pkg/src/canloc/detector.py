"""Bus-topology-change detection via autoencoder reconstruction error.

An autoencoder trained only on clean-bus features reconstructs clean
signals well and perturbed ones poorly; the alarm threshold is the mean of
the clean validation reconstruction errors plus their standard deviation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .features import ChannelMode, FeatureVector
from .nn import LayerSpec, Sequential, TrainConfig, TrainHistory, build_model, train
from .nn.io import load_model, save_model


class DetectorError(Exception):
    pass


def autoencoder_specs(l_f: int) -> list[LayerSpec]:
    """Encoder at 50% and 25% of the input width, mirrored decoder.

    Hidden layers use batch normalization and leaky ReLU; the output layer
    is linear over the [0, 1]-normalized feature space.
    """
    h1, h2 = l_f // 2, l_f // 4
    hidden = lambda units: [
        LayerSpec("dense", units=units),
        LayerSpec("batchnorm"),
        LayerSpec("activation", activation="leaky_relu"),
    ]
    return (
        hidden(h1)
        + hidden(h2)
        + hidden(h1)
        + [LayerSpec("dense", units=l_f), LayerSpec("activation", activation="linear")]
    )


DEFAULT_DETECTOR_TRAIN = TrainConfig(
    optimizer="adam", learning_rate=1e-3, loss="mse", max_epochs=300, patience=10
)


@dataclass
class DetectorModel:
    autoencoder: Sequential
    thr: float
    channel: ChannelMode = ChannelMode.CAN_H
    history: Optional[TrainHistory] = field(default=None, repr=False, compare=False)

    @property
    def l_f(self) -> int:
        return self.autoencoder.input_shape[0]


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        x = features
    else:
        x = np.stack(
            [f.values if isinstance(f, FeatureVector) else np.asarray(f) for f in features]
        )
    if x.ndim != 2 or len(x) == 0:
        raise DetectorError("need a non-empty (n, L_f) feature matrix")
    return np.asarray(x, dtype=np.float64)


def compute_threshold(val_mses: Sequence[float]) -> float:
    """Alarm threshold: mean plus (population) standard deviation."""
    v = np.asarray(val_mses, dtype=np.float64)
    if v.size == 0:
        raise DetectorError("threshold needs at least one validation error")
    return float(v.mean() + v.std())


def reconstruction_errors(autoencoder: Sequential, x: np.ndarray) -> np.ndarray:
    """Per-row MSE between input features and their reconstruction."""
    x = _as_matrix(x)
    rec = autoencoder.predict(x)
    return np.mean((rec - x) ** 2, axis=1)


def train_detector(
    tr_clean,
    val_clean,
    cfg: Optional[TrainConfig] = None,
    channel: ChannelMode = ChannelMode.CAN_H,
    seed: int = 0,
) -> DetectorModel:
    """Train the autoencoder on clean features and fix the threshold.

    Both sets must come from the clean topology, in chronological order;
    val_clean drives early stopping and the threshold.
    """
    x_tr = _as_matrix(tr_clean)
    x_val = _as_matrix(val_clean)
    if x_tr.shape[1] != x_val.shape[1]:
        raise DetectorError(
            f"feature length mismatch: train {x_tr.shape[1]} vs val {x_val.shape[1]}"
        )
    cfg = cfg or DEFAULT_DETECTOR_TRAIN
    if cfg.loss != "mse":
        raise DetectorError("detector training uses the mse loss")
    cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})

    model = build_model(autoencoder_specs(x_tr.shape[1]), (x_tr.shape[1],), seed=seed)
    history = train(model, x_tr, x_tr, cfg, x_val=x_val, y_val=x_val)
    thr = compute_threshold(reconstruction_errors(model, x_val))
    return DetectorModel(autoencoder=model, thr=thr, channel=channel, history=history)


def is_bus_compromised(sig, model: DetectorModel) -> bool:
    """True iff the signal's reconstruction error strictly exceeds thr."""
    values = sig.values if isinstance(sig, FeatureVector) else np.asarray(sig)
    if values.shape != (model.l_f,):
        raise DetectorError(f"signal length {values.shape} != ({model.l_f},)")
    err = float(reconstruction_errors(model.autoencoder, values[None, :])[0])
    return err > model.thr


def vote_compromised(sigs, model: DetectorModel, k: int) -> bool:
    """Optional k-of-n vote over several start-up signals (default off)."""
    hits = sum(is_bus_compromised(s, model) for s in sigs)
    return hits >= k


def save_detector(path, model: DetectorModel):
    save_model(
        path,
        model.autoencoder,
        {
            "model_type": "detector",
            "threshold": model.thr,
            "l_f": model.l_f,
            "channel": model.channel.value,
        },
    )


def load_detector(path) -> DetectorModel:
    net, meta = load_model(path)
    if meta.get("model_type") != "detector":
        raise DetectorError(f"{path} is not a detector model")
    return DetectorModel(
        autoencoder=net,
        thr=float(meta["threshold"]),
        channel=ChannelMode(meta["channel"]),
    )
