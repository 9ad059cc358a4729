"""Continuous ECU authentication and origin identification.

One binary CNN per legitimate ECU scores how strongly a signal matches
that ECU's fingerprint. A frame is accepted when the classifier for its
claimed identifier scores at least 0.5; anything below triggers an alert
and an identification pass over all classifiers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .features import ChannelMode, FeatureVector
from .nn import (
    FastInference,
    LayerSpec,
    Sequential,
    TrainConfig,
    TrainHistory,
    build_model,
    train,
)
from .nn.io import load_model, save_model

UNKNOWN = "UNKNOWN"
ACCEPT_THRESHOLD = 0.5


class AuthError(Exception):
    pass


def binary_cnn_specs() -> list[LayerSpec]:
    """Two 32-filter conv layers, one pool, dense 100, sigmoid scalar.

    Dropout 0.5 follows the pooling layer and the dense layer.
    """
    return [
        LayerSpec("conv1d", filters=32, kernel_size=3),
        LayerSpec("activation", activation="relu"),
        LayerSpec("conv1d", filters=32, kernel_size=3),
        LayerSpec("activation", activation="relu"),
        LayerSpec("maxpool1d", pool_size=2),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("dense", units=100),
        LayerSpec("activation", activation="relu"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("dense", units=1),
        LayerSpec("activation", activation="sigmoid"),
    ]


DEFAULT_AUTH_TRAIN = TrainConfig(
    optimizer="rmsprop",
    learning_rate=1e-4,
    loss="weighted_bce",
    max_epochs=120,
    patience=10,
)


def interleave_blocks(
    blocks: Sequence[tuple[np.ndarray, Sequence[str]]], rounds: int = 20
) -> tuple[np.ndarray, list[str]]:
    """Merge per-session feature blocks into interleaved collection rounds.

    The trailing chronological validation split then samples every session
    (topology) instead of only the last ones recorded.
    """
    xs, labels = [], []
    for r in range(rounds):
        for x, lab in blocks:
            lo = (len(lab) * r) // rounds
            hi = (len(lab) * (r + 1)) // rounds
            xs.append(x[lo:hi])
            labels.extend(lab[lo:hi])
    return np.concatenate(xs), labels


def inverse_frequency_weights(y: np.ndarray) -> tuple[float, float]:
    """Cost-sensitive class weights w_c = N_total / (2 * N_c)."""
    n = len(y)
    n1 = int(np.sum(y > 0.5))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise AuthError("training set must contain both classes")
    return (n / (2.0 * n0), n / (2.0 * n1))


@dataclass
class BinaryCnnModel:
    ecu_id: str
    cnn: Sequential
    channel: ChannelMode = ChannelMode.DIFFERENTIAL
    history: Optional[TrainHistory] = field(default=None, repr=False, compare=False)
    _fast: Optional[FastInference] = field(default=None, repr=False, compare=False)

    @property
    def l_f(self) -> int:
        return self.cnn.input_shape[0]

    def score(self, values: np.ndarray) -> float:
        """Match probability for one feature vector (dropout disabled)."""
        if self._fast is None:
            self._fast = FastInference(self.cnn)
        return float(self._fast(values)[0])


def train_auth(
    ecu_id: str,
    x: np.ndarray,
    y: np.ndarray,
    cfg: Optional[TrainConfig] = None,
    channel: ChannelMode = ChannelMode.DIFFERENTIAL,
    seed: int = 0,
) -> BinaryCnnModel:
    """Train one ECU's binary classifier on origin-labeled features.

    y holds 1 where the signal's true origin is ecu_id, else 0. Class
    weights follow the inverse-frequency cost-sensitive rule unless the
    config pins its own.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    cfg = cfg or DEFAULT_AUTH_TRAIN
    weights = cfg.class_weights
    if cfg.loss == "weighted_bce" and weights is None:
        weights = inverse_frequency_weights(y)
    elif cfg.loss != "weighted_bce":
        inverse_frequency_weights(y)  # still reject single-class inputs
    cfg = TrainConfig(**{**cfg.__dict__, "class_weights": weights, "seed": seed})

    model = build_model(binary_cnn_specs(), (x.shape[1], 1), seed=seed)
    history = train(model, x[:, :, None], y, cfg)
    return BinaryCnnModel(ecu_id=ecu_id, cnn=model, channel=channel, history=history)


@dataclass
class AuthVerdict:
    claimed_id: str
    score: float
    accepted: bool
    identified_origin: Optional[str] = None
    low_confidence: bool = False


@dataclass
class IdentifyResult:
    label: str
    low_confidence: bool
    scores: dict[str, float]


class AuthBank:
    """The per-ECU classifiers plus the static CAN-ID-to-ECU table."""

    def __init__(self, models: Mapping[str, BinaryCnnModel], id_table: Mapping[int, str]):
        self.models = dict(models)
        self.id_table = dict(id_table)
        self.order = list(self.models)  # roster order fixes tie-breaking
        for ecu in self.id_table.values():
            if ecu not in self.models:
                raise AuthError(f"id table references unknown ECU {ecu!r}")

    def resolve(self, can_id: int) -> str:
        try:
            return self.id_table[int(can_id)]
        except KeyError:
            raise AuthError(f"no ECU mapped to CAN identifier {can_id:#x}") from None


def _values(sig) -> np.ndarray:
    return sig.values if isinstance(sig, FeatureVector) else np.asarray(sig)


def identify(sig, bank: AuthBank, bus_compromised: bool = False) -> IdentifyResult:
    """Most probable origin of a signal across every binary classifier.

    Below-0.5 maxima mean no known ECU matches: on a compromised bus that
    is reported as UNKNOWN (a new device), on a clean bus as the argmax
    flagged low-confidence. Ties go to the lowest-index ECU.
    """
    if not bank.models:
        raise AuthError("no trained models")
    v = _values(sig)
    scores = {ecu: bank.models[ecu].score(v) for ecu in bank.order}
    best = max(bank.order, key=lambda e: scores[e])  # max keeps first on ties
    if scores[best] < ACCEPT_THRESHOLD:
        if bus_compromised:
            return IdentifyResult(label=UNKNOWN, low_confidence=True, scores=scores)
        return IdentifyResult(label=best, low_confidence=True, scores=scores)
    return IdentifyResult(label=best, low_confidence=False, scores=scores)


def authenticate(
    sig, claimed_id: int, bank: AuthBank, bus_compromised: bool = False
) -> AuthVerdict:
    """Score a signal against the classifier its CAN identifier claims.

    Scores below 0.5 are rejected and identification fills in the likely
    true origin.
    """
    ecu = bank.resolve(claimed_id)
    score = bank.models[ecu].score(_values(sig))
    if score >= ACCEPT_THRESHOLD:
        return AuthVerdict(claimed_id=ecu, score=score, accepted=True)
    result = identify(sig, bank, bus_compromised)
    return AuthVerdict(
        claimed_id=ecu,
        score=score,
        accepted=False,
        identified_origin=result.label,
        low_confidence=result.low_confidence,
    )


def save_auth_model(path, model: BinaryCnnModel):
    save_model(
        path,
        model.cnn,
        {
            "model_type": "auth",
            "ecu_id": model.ecu_id,
            "l_f": model.l_f,
            "channel": model.channel.value,
        },
    )


def load_auth_model(path) -> BinaryCnnModel:
    net, meta = load_model(path)
    if meta.get("model_type") != "auth":
        raise AuthError(f"{path} is not an authentication model")
    return BinaryCnnModel(
        ecu_id=meta["ecu_id"], cnn=net, channel=ChannelMode(meta["channel"])
    )
