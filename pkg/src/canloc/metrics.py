"""False-rejection / false-acceptance bookkeeping and confusion matrices."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np


class MetricsError(Exception):
    pass


@dataclass
class EcuRates:
    legit_total: int = 0
    legit_rejected: int = 0
    impostor_total: int = 0
    impostor_accepted: int = 0

    @property
    def frr(self) -> float:
        return self.legit_rejected / self.legit_total if self.legit_total else 0.0

    @property
    def far(self) -> float:
        return self.impostor_accepted / self.impostor_total if self.impostor_total else 0.0

    def as_dict(self) -> dict:
        return {
            "frr": round(self.frr, 6),
            "far": round(self.far, 6),
            "legit_total": self.legit_total,
            "legit_rejected": self.legit_rejected,
            "impostor_total": self.impostor_total,
            "impostor_accepted": self.impostor_accepted,
        }


@dataclass
class MetricsReport:
    per_ecu: dict[str, EcuRates] = field(default_factory=dict)
    classes: tuple[str, ...] = ()
    confusion: Optional[np.ndarray] = None
    overall_accuracy: Optional[float] = None
    counts: dict[str, int] = field(default_factory=dict)

    def per_class_accuracy(self) -> dict[str, float]:
        if self.confusion is None:
            return {}
        out = {}
        for i, c in enumerate(self.classes):
            row = self.confusion[i]
            out[c] = float(row[i] / row.sum()) if row.sum() else 0.0
        return out

    def to_json(self) -> str:
        record: dict = {"counts": dict(sorted(self.counts.items()))}
        if self.per_ecu:
            record["per_ecu"] = {e: r.as_dict() for e, r in sorted(self.per_ecu.items())}
        if self.confusion is not None:
            record["classes"] = list(self.classes)
            record["confusion"] = self.confusion.astype(int).tolist()
            record["per_class_accuracy"] = {
                c: round(v, 6) for c, v in self.per_class_accuracy().items()
            }
        if self.overall_accuracy is not None:
            record["overall_accuracy"] = round(self.overall_accuracy, 6)
        return json.dumps(record, sort_keys=True)

    def format_table(self) -> str:
        lines = []
        if self.per_ecu:
            lines.append(f"{'ECU':<8}{'FRR':>10}{'FAR':>10}{'legit':>8}{'impostor':>10}")
            for ecu, r in sorted(self.per_ecu.items()):
                lines.append(
                    f"{ecu:<8}{r.frr:>10.4f}{r.far:>10.4f}"
                    f"{r.legit_total:>8d}{r.impostor_total:>10d}"
                )
        if self.confusion is not None:
            lines.append("")
            header = "actual\\pred" + "".join(f"{c:>7}" for c in self.classes)
            lines.append(header)
            for i, c in enumerate(self.classes):
                row = "".join(f"{int(v):>7d}" for v in self.confusion[i])
                lines.append(f"{c:<11}" + row)
        if self.overall_accuracy is not None:
            lines.append("")
            lines.append(f"overall accuracy: {self.overall_accuracy:.4f}")
        return "\n".join(lines)


def auth_rates(
    scores: Mapping[str, Sequence[float]],
    origins: Sequence[str],
    threshold: float = 0.5,
) -> MetricsReport:
    """Per-ECU FRR/FAR from every-signal-vs-every-model scores.

    scores[e][i] is model e's output on signal i; origins[i] is the signal's
    true source. A signal is a legitimate claim for its own origin's model
    and an impostor claim for every other model.
    """
    report = MetricsReport()
    n = len(origins)
    for ecu, row in scores.items():
        if len(row) != n:
            raise MetricsError("score rows must align with origins")
        rates = EcuRates()
        for s, origin in zip(row, origins):
            accepted = s >= threshold
            if origin == ecu:
                rates.legit_total += 1
                rates.legit_rejected += not accepted
            else:
                rates.impostor_total += 1
                rates.impostor_accepted += accepted
        report.per_ecu[ecu] = rates
    report.counts["signals"] = n
    return report


def confusion_report(
    truths: Sequence[str], preds: Sequence[str], classes: Sequence[str]
) -> MetricsReport:
    if len(truths) != len(preds):
        raise MetricsError("truth/prediction length mismatch")
    classes = tuple(classes)
    idx = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truths, preds):
        m[idx[t], idx[p]] += 1
    acc = float(np.trace(m) / m.sum()) if m.sum() else 0.0
    return MetricsReport(
        classes=classes,
        confusion=m,
        overall_accuracy=acc,
        counts={"trials": len(truths)},
    )


def accuracy_report(truths: Sequence[str], preds: Sequence[str]) -> MetricsReport:
    if len(truths) != len(preds):
        raise MetricsError("truth/prediction length mismatch")
    correct = sum(t == p for t, p in zip(truths, preds))
    return MetricsReport(
        overall_accuracy=correct / len(truths) if truths else 0.0,
        counts={"trials": len(truths), "correct": correct},
    )
