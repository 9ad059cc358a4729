"""Start-up intrusion handling and the continuous authentication loop.

On vehicle start the first usable frame decides clean vs compromised. A
compromised bus enters a monitoring window of length TP during which every
frame is authenticated and the latest accepted signal per ECU is stored.
If every roster member authenticates, the stored signals feed insertion
localization (which may fire before TP elapses); any member still missing
when TP ends marks a replacement at that member's tap. Afterwards (or
immediately on a clean bus) every frame is authenticated and rejections
emit spoof alerts carrying the identified true origin.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .authenticator import AuthBank, AuthVerdict, authenticate
from .bus import RawTrace
from .detector import DetectorModel, is_bus_compromised
from .features import (
    ChannelMode,
    FeatureConfig,
    FeatureError,
    FeatureVector,
    extract_edges,
    frame_from_trace,
)
from .localizer import LocalizerModel, locate_insertion_point
from .rng import substream

TOPOLOGY_CHANGE = "TOPOLOGY_CHANGE"
SPOOF = "SPOOF"
INSERTION = "INSERTION"
REPLACEMENT = "REPLACEMENT"

DEFAULT_TP_SECONDS = 2.0
DEFAULT_FRAME_GAP_SECONDS = 0.01


class OrchestrationError(Exception):
    pass


class MonitoringIncomplete(OrchestrationError):
    """Missing-ECU query before the monitoring period has elapsed."""


@dataclass(frozen=True)
class RosterEntry:
    ecu: str
    tap: str
    ids: tuple[int, ...]


@dataclass(frozen=True)
class EcuRoster:
    entries: tuple[RosterEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise OrchestrationError("roster must list at least one ECU")
        taps = [e.tap for e in self.entries]
        names = [e.ecu for e in self.entries]
        if len(set(taps)) != len(taps) or len(set(names)) != len(names):
            raise OrchestrationError("roster taps and ECU names must be unique")
        all_ids = [i for e in self.entries for i in e.ids]
        if len(set(all_ids)) != len(all_ids):
            raise OrchestrationError("roster CAN-ID sets must be disjoint")

    def labels(self) -> list[str]:
        return [e.ecu for e in self.entries]

    def tap_of(self, ecu: str) -> str:
        for e in self.entries:
            if e.ecu == ecu:
                return e.tap
        raise OrchestrationError(f"{ecu!r} is not on the roster")

    def id_table(self) -> dict[int, str]:
        return {i: e.ecu for e in self.entries for i in e.ids}

    def to_json(self) -> str:
        return json.dumps(
            [{"ecu": e.ecu, "tap": e.tap, "ids": list(e.ids)} for e in self.entries],
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EcuRoster":
        rows = json.loads(text)
        return cls(
            entries=tuple(
                RosterEntry(ecu=r["ecu"], tap=r["tap"], ids=tuple(int(i) for i in r["ids"]))
                for r in rows
            )
        )


@dataclass
class Alert:
    kind: str
    timestamp: float
    location: Optional[str] = None
    attack_type: Optional[str] = None
    missing: tuple[str, ...] = ()
    no_transmission_caveat: bool = False
    claimed: Optional[str] = None
    true_origin: Optional[str] = None
    score: Optional[float] = None
    low_confidence: bool = False

    def to_json(self) -> str:
        record = {"kind": self.kind, "timestamp": round(self.timestamp, 9)}
        if self.kind == TOPOLOGY_CHANGE:
            record["attack_type"] = self.attack_type
            record["location"] = self.location
            if self.missing:
                record["missing"] = list(self.missing)
            if self.no_transmission_caveat:
                record["no_transmission_caveat"] = True
        else:
            record["claimed"] = self.claimed
            record["true_origin"] = self.true_origin
            record["score"] = round(float(self.score), 6)
            if self.low_confidence:
                record["low_confidence"] = True
        return json.dumps(record, sort_keys=True)


class MonitorState:
    """Latest authenticated signal per ECU inside the TP window."""

    def __init__(self, tp: float, started_at: float):
        self.tp = tp
        self.started_at = started_at
        self.now = started_at
        self.last_auth: dict[str, dict[ChannelMode, FeatureVector]] = {}
        self.skipped_unknown = 0

    def advance(self, now: float):
        self.now = max(self.now, now)

    @property
    def tp_elapsed(self) -> bool:
        return self.now - self.started_at >= self.tp


class Pipeline:
    """Wires the trained models to a frame stream (one logical consumer)."""

    def __init__(
        self,
        detector: DetectorModel,
        localizer: Optional[LocalizerModel],
        bank: AuthBank,
        roster: EcuRoster,
        feature_cfg: FeatureConfig = FeatureConfig(),
        tp: float = DEFAULT_TP_SECONDS,
        frame_gap: float = DEFAULT_FRAME_GAP_SECONDS,
        startup_votes: int = 1,
        seed: int = 0,
    ):
        self.detector = detector
        self.localizer = localizer
        self.bank = bank
        self.roster = roster
        self.feature_cfg = feature_cfg
        self.tp = tp
        self.frame_gap = frame_gap
        self.startup_votes = max(1, startup_votes)
        self.rng = substream(seed, "tiebreak")
        self.clock = 0.0
        self.compromised = False
        self.monitoring_entered = False
        self.skipped_unknown = 0

    # -- frame utilities ---------------------------------------------------

    def _arrival(self, trace: RawTrace) -> float:
        self.clock += len(trace) / trace.sample_rate + self.frame_gap
        return self.clock

    def _features(self, trace: RawTrace, mode: ChannelMode) -> Optional[FeatureVector]:
        from .frames import CanError

        try:
            frame, mask, _ = frame_from_trace(trace)
        except (CanError, FeatureError):
            return None
        if frame.rtr:  # remote frames carry no data and are never scored
            return None
        try:
            return extract_edges(trace, mask, mode, self.feature_cfg)
        except FeatureError:
            return None

    @property
    def _auth_channel(self) -> ChannelMode:
        return next(iter(self.bank.models.values())).channel

    # -- start-up phase ----------------------------------------------------

    def detect_physical_intrusion(
        self, sig: FeatureVector, frames: Iterable[RawTrace]
    ) -> Optional[Alert]:
        """Start-up check on one signal; `frames` feeds monitoring if dirty."""
        if not is_bus_compromised(sig, self.detector):
            return None
        return self._handle_compromised(frames)

    def detect_physical_intrusion_from(self, frames: Iterable[RawTrace]) -> Optional[Alert]:
        """Start-up check on the first usable frame of a stream."""
        frames = iter(frames)
        for trace in frames:
            self._arrival(trace)
            sig = self._features(trace, self.detector.channel)
            if sig is not None:
                return self.detect_physical_intrusion(sig, frames)
        return None

    def _handle_compromised(self, frames: Iterable[RawTrace]) -> Alert:
        """Monitor until everyone authenticated or TP elapsed, then locate."""
        self.compromised = True
        self.monitoring_entered = True
        state = MonitorState(tp=self.tp, started_at=self.clock)
        roster_set = set(self.roster.labels())
        exhausted = True
        for trace in frames:
            ts = self._arrival(trace)
            self.monitor_ingest(trace, state, timestamp=ts)
            if roster_set.issubset(state.last_auth) or state.tp_elapsed:
                exhausted = False  # early insertion trigger or window over
                break
        if exhausted:
            # End of stream closes the monitoring window.
            state.advance(state.started_at + state.tp)
        attack_type, location, missing = self.locate_physical_intrusion(state)
        return Alert(
            kind=TOPOLOGY_CHANGE,
            timestamp=state.now,
            attack_type=attack_type,
            location=location,
            missing=missing,
            no_transmission_caveat=attack_type == REPLACEMENT,
        )

    def monitor_ingest(
        self, trace: RawTrace, state: MonitorState, timestamp: Optional[float] = None
    ) -> Optional[AuthVerdict]:
        """Authenticate one frame; accepted frames overwrite last_auth."""
        from .authenticator import AuthError

        if timestamp is not None:
            state.advance(timestamp)
        sig = self._features(trace, self._auth_channel)
        if sig is None:
            return None
        try:
            verdict = authenticate(sig, sig.ecu_claim, self.bank, bus_compromised=True)
        except AuthError:
            state.skipped_unknown += 1
            self.skipped_unknown += 1
            return None
        if verdict.accepted:
            stored = {self.bank.models[verdict.claimed_id].channel: sig}
            if self.localizer is not None:
                loc_sig = self._features(trace, self.localizer.channel)
                if loc_sig is not None:
                    stored[self.localizer.channel] = loc_sig
            state.last_auth[verdict.claimed_id] = stored
        return verdict

    def get_missing_ecus(self, state: MonitorState) -> set[str]:
        """Roster members without an authenticated signal.

        Raises MonitoringIncomplete when someone is still missing but TP
        has not elapsed (the insertion path may trigger early only once
        everyone is present).
        """
        missing = set(self.roster.labels()) - set(state.last_auth)
        if missing and not state.tp_elapsed:
            raise MonitoringIncomplete(
                f"{sorted(missing)} still missing with TP not elapsed"
            )
        return missing

    def locate_physical_intrusion(
        self, state: MonitorState
    ) -> tuple[str, str, tuple[str, ...]]:
        """Resolve (attack type, tap point, missing set) after monitoring."""
        if not self.monitoring_entered:
            raise OrchestrationError("localization before a positive detection")
        missing = self.get_missing_ecus(state)
        if missing:
            ordered = tuple(e for e in self.roster.labels() if e in missing)
            return REPLACEMENT, self.roster.tap_of(ordered[0]), ordered
        if self.localizer is None:
            raise OrchestrationError("no localizer model configured")
        signals = [
            state.last_auth[ecu][self.localizer.channel] for ecu in self.roster.labels()
        ]
        point = locate_insertion_point(signals, self.localizer, self.rng)
        return INSERTION, point, ()

    # -- continuous phase ----------------------------------------------------

    def continuous_loop(self, frames: Iterable[RawTrace]) -> Iterator[Alert]:
        """Authenticate every frame, yielding spoof alerts in frame order."""
        from .authenticator import AuthError

        mode = self._auth_channel
        for trace in frames:
            ts = self._arrival(trace)
            sig = self._features(trace, mode)
            if sig is None:
                continue
            try:
                verdict = authenticate(
                    sig, sig.ecu_claim, self.bank, bus_compromised=self.compromised
                )
            except AuthError:
                self.skipped_unknown += 1
                continue
            if not verdict.accepted:
                yield Alert(
                    kind=SPOOF,
                    timestamp=ts,
                    claimed=verdict.claimed_id,
                    true_origin=verdict.identified_origin,
                    score=verdict.score,
                    low_confidence=verdict.low_confidence,
                )

    def run(self, frames: Iterable[RawTrace]) -> Iterator[Alert]:
        """Full sequence: start-up detection, then the continuous loop."""
        frames = iter(frames)
        sigs: list[FeatureVector] = []
        for trace in frames:
            self._arrival(trace)
            sig = self._features(trace, self.detector.channel)
            if sig is not None:
                sigs.append(sig)
            if len(sigs) >= self.startup_votes:
                break
        if sigs:
            hits = sum(is_bus_compromised(s, self.detector) for s in sigs)
            if hits > self.startup_votes // 2:  # majority (k-of-n vote)
                yield self._handle_compromised(frames)
        yield from self.continuous_loop(frames)
