"""Insertion-point localization: augmentation, 1-D VGG16, majority vote.

Training signals come from legitimate ECUs recorded while a known device
sits at each open insertion point. Each signal is expanded into K noisy,
cyclically shifted copies so the classifier generalizes to intruder
hardware it has never seen. At decision time each legitimate ECU's most
recent authenticated signal votes with its argmax class and the modal
candidate wins, ties broken uniformly at random.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .features import ChannelMode, FeatureVector
from .nn import LayerSpec, Sequential, TrainConfig, TrainHistory, build_model, train
from .nn.io import load_model, save_model
from .rng import substream

INSERTION_POINTS = ("B", "D", "F", "H", "J")


class LocalizerError(Exception):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    points: tuple[str, ...] = INSERTION_POINTS
    k: int = 20
    r: int = 10
    mu: float = 0.0
    sigma: float = 1.0
    # The unit-sigma draw is expressed in normalized feature units scaled by
    # this factor (2% of dynamic range); literal unit noise would bury the
    # signal entirely.
    sigma_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise LocalizerError("need at least one copy per signal")
        if self.r < 0:
            raise LocalizerError("max roll-off must be >= 0")
        if not self.points or len(set(self.points)) != len(self.points):
            raise LocalizerError("points must be non-empty and unique")


def roll_off(r: int, s: np.ndarray) -> np.ndarray:
    """Right cyclic rotation by r (mod len) samples."""
    if r < 0:
        raise LocalizerError("roll-off distance must be >= 0")
    s = np.asarray(s)
    return np.roll(s, r % len(s))


def generate_signals(
    per_point: Mapping[str, Sequence[np.ndarray]], cfg: AugmentationConfig
) -> dict[str, list[np.ndarray]]:
    """Expand each collected signal into K noisy shifted copies per point.

    Draw order per copy is one Gaussian noise vector then one uniform shift
    in [0, R], consumed from the substream named "augment" of cfg.seed.
    """
    rng = substream(cfg.seed, "augment")
    out: dict[str, list[np.ndarray]] = {}
    for p in cfg.points:
        signals = per_point.get(p, ())
        if len(signals) == 0:
            raise LocalizerError(f"no signals collected at insertion point {p}")
        copies: list[np.ndarray] = []
        for s in signals:
            s = np.asarray(s, dtype=np.float64)
            for _ in range(cfg.k):
                noise = rng.normal(cfg.mu, cfg.sigma * cfg.sigma_scale, size=len(s))
                shifted = roll_off(int(rng.integers(0, cfg.r + 1)), s + noise)
                copies.append(shifted)
        out[p] = copies
    return out


def flatten_augmented(
    augmented: Mapping[str, Sequence[np.ndarray]], points: Sequence[str]
) -> tuple[np.ndarray, list[str]]:
    """Stack per-point signal lists into one labeled training matrix."""
    xs, ys = [], []
    for p in points:
        for s in augmented[p]:
            xs.append(s)
            ys.append(p)
    return np.stack(xs), ys


def build_training_set(
    per_ecu: Mapping[str, Mapping[str, Sequence[np.ndarray]]],
    k: int = 20,
    r: int = 10,
    points: Sequence[str] = INSERTION_POINTS,
    sigma_scale: float = 0.02,
    seed: int = 0,
) -> tuple[np.ndarray, list[str]]:
    """Augment every ECU's per-point signals and assemble one labeled set.

    The output is ordered by collection round (signal index, then ECU, then
    point, with each signal's K copies kept together), mirroring how
    round-robin recording interleaves in time. A chronological trailing
    split of this set therefore covers every class and every ECU.
    """
    from .rng import derive_seed

    points = tuple(points)
    augmented: dict[str, dict[str, list[np.ndarray]]] = {}
    n_signals = None
    for ecu in sorted(per_ecu):
        cfg = AugmentationConfig(
            points=points, k=k, r=r, sigma_scale=sigma_scale,
            seed=derive_seed(seed, f"augment/{ecu}"),
        )
        augmented[ecu] = generate_signals(per_ecu[ecu], cfg)
        counts = {p: len(per_ecu[ecu][p]) for p in points}
        low = min(counts.values())
        n_signals = low if n_signals is None else min(n_signals, low)

    xs, ys = [], []
    for i in range(n_signals):
        for ecu in sorted(augmented):
            for p in points:
                xs.extend(augmented[ecu][p][i * k : (i + 1) * k])
                ys.extend([p] * k)
    return np.stack(xs), ys


def vgg1d_specs(
    n_classes: int, width: float = 0.125, dense_units: int = 256
) -> list[LayerSpec]:
    """1-D VGG16: five conv blocks (2,2,3,3,3 layers), two dense, softmax.

    Filter counts 64/128/256/512/512 are scaled by `width` to keep training
    at desk scale. Each convolution is followed by batch normalization (the
    VGG16-BN variant): thirteen plain conv layers do not train from scratch
    at this depth.
    """
    specs: list[LayerSpec] = []
    for n_conv, filters in ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)):
        f = max(1, round(filters * width))
        for _ in range(n_conv):
            specs.append(LayerSpec("conv1d", filters=f, kernel_size=3))
            specs.append(LayerSpec("batchnorm"))
            specs.append(LayerSpec("activation", activation="relu"))
        specs.append(LayerSpec("maxpool1d", pool_size=2))
    for _ in range(2):
        specs.append(LayerSpec("dense", units=dense_units))
        specs.append(LayerSpec("activation", activation="relu"))
        specs.append(LayerSpec("dropout", rate=0.5))
    specs.append(LayerSpec("dense", units=n_classes))
    specs.append(LayerSpec("activation", activation="softmax"))
    return specs


DEFAULT_LOCALIZER_TRAIN = TrainConfig(
    optimizer="rmsprop", learning_rate=1e-5, loss="cce", max_epochs=150, patience=10
)


@dataclass
class LocalizerModel:
    cnn: Sequential
    classes: tuple[str, ...]
    channel: ChannelMode = ChannelMode.CAN_L
    history: Optional[TrainHistory] = field(default=None, repr=False, compare=False)

    @property
    def l_f(self) -> int:
        return self.cnn.input_shape[0]


def train_localizer(
    x: np.ndarray,
    labels: Sequence[str],
    classes: Sequence[str] = INSERTION_POINTS,
    cfg: Optional[TrainConfig] = None,
    width: float = 0.125,
    channel: ChannelMode = ChannelMode.CAN_L,
    seed: int = 0,
) -> LocalizerModel:
    """Train the multiclass insertion-point classifier.

    `labels` must cover every class; data order is preserved so the 30%
    validation split stays chronological.
    """
    x = np.asarray(x, dtype=np.float64)
    classes = tuple(classes)
    present = set(labels)
    if not present.issubset(classes):
        raise LocalizerError(f"labels {present - set(classes)} outside classes")
    missing = [c for c in classes if c not in present]
    if missing:
        raise LocalizerError(f"classes absent from training set: {missing}")

    y = np.array([classes.index(l) for l in labels])
    cfg = cfg or DEFAULT_LOCALIZER_TRAIN
    cfg = TrainConfig(**{**cfg.__dict__, "loss": "cce", "seed": seed})
    model = build_model(vgg1d_specs(len(classes), width=width), (x.shape[1], 1), seed=seed)
    history = train(model, x[:, :, None], y, cfg)
    return LocalizerModel(cnn=model, classes=classes, channel=channel, history=history)


def class_probabilities(model: LocalizerModel, signals) -> np.ndarray:
    x = np.stack(
        [s.values if isinstance(s, FeatureVector) else np.asarray(s) for s in signals]
    )
    return model.cnn.predict(x[:, :, None])


def candidates_from_probs(probs: np.ndarray, classes: Sequence[str]) -> list[str]:
    """Per-signal argmax candidates (invariant to positive row scaling)."""
    return [classes[int(i)] for i in np.argmax(probs, axis=1)]


def majority_set(candidates: Sequence[str]) -> list[str]:
    """All modal candidates, sorted for deterministic downstream choice."""
    counts: dict[str, int] = {}
    for c in candidates:
        counts[c] = counts.get(c, 0) + 1
    top = max(counts.values())
    return sorted(c for c, n in counts.items() if n == top)


def locate_insertion_point(
    signals, model: LocalizerModel, rng: np.random.Generator
) -> str:
    """Majority vote over one authenticated signal per legitimate ECU.

    A unique modal candidate wins outright; ties are resolved uniformly at
    random from the tie set.
    """
    probs = class_probabilities(model, signals)
    winners = majority_set(candidates_from_probs(probs, model.classes))
    if len(winners) == 1:
        return winners[0]
    return winners[int(rng.integers(0, len(winners)))]


def eval_majority_trials(
    traces,
    model: LocalizerModel,
    fcfg=None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[list[str], list[str]]:
    """Group labeled traces into per-ECU voting trials and locate each.

    Traces are grouped by network config tag; within a config, consecutive
    frames are collected until every transmitting ECU has contributed one
    signal, which forms one majority-vote trial. Returns (true points,
    predicted points).
    """
    from . import bus as _bus
    from .features import FeatureConfig, FeatureError, extract_from_trace

    if fcfg is None:
        fcfg = FeatureConfig()
    if rng is None:
        rng = substream(0, "tiebreak")
    by_cfg: dict[str, list] = {}
    for t in traces:
        if t.is_attacker:
            continue
        by_cfg.setdefault(t.config_tag, []).append(t)
    truths: list[str] = []
    preds: list[str] = []
    for tag, group in sorted(by_cfg.items()):
        point = _bus.insertion_point_of(tag)
        if point is None:
            raise LocalizerError(f"{tag!r} is not an insertion configuration")
        sources = sorted({t.source_label for t in group})
        current: dict[str, np.ndarray] = {}
        for t in group:
            try:
                vec = extract_from_trace(t, model.channel, fcfg).values
            except FeatureError:
                continue
            if t.source_label in current:
                current = {}
            current[t.source_label] = vec
            if len(current) == len(sources):
                signals = [current[s] for s in sources]
                preds.append(locate_insertion_point(signals, model, rng))
                truths.append(point)
                current = {}
    return truths, preds


def save_localizer(path, model: LocalizerModel):
    save_model(
        path,
        model.cnn,
        {
            "model_type": "localizer",
            "classes": list(model.classes),
            "l_f": model.l_f,
            "channel": model.channel.value,
        },
    )


def load_localizer(path) -> LocalizerModel:
    net, meta = load_model(path)
    if meta.get("model_type") != "localizer":
        raise LocalizerError(f"{path} is not a localizer model")
    return LocalizerModel(
        cnn=net, classes=tuple(meta["classes"]), channel=ChannelMode(meta["channel"])
    )
