"""Fixed-length edge-window features from raw frame traces.

A feature vector is the concatenation of short sample windows around the
first rising/falling transitions whose destination bit lies in the control,
data or CRC field, min-max normalized to [0, 1] against the nominal rail
span of the selected channel.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .bus import RawTrace
from .frames import CanFrame, FieldMask, StuffedBitstream, parse_stream


class FeatureError(Exception):
    """Trace cannot produce a valid feature vector."""


class ChannelMode(str, Enum):
    CAN_H = "CAN_H"
    CAN_L = "CAN_L"
    DIFFERENTIAL = "DIFFERENTIAL"


# Nominal spans used for min-max normalization (volts).
NORMALIZATION_SPAN = {
    ChannelMode.CAN_H: (1.5, 3.5),
    ChannelMode.CAN_L: (1.5, 3.5),
    ChannelMode.DIFFERENTIAL: (-0.2, 2.2),
}

# Mid-way between the nominal recessive level (2.5 V) and the dominant
# CAN-H rail (3.5 V); used to read bit values off a sampled trace.
CAN_H_BIT_THRESHOLD = 3.0


@dataclass(frozen=True)
class FeatureConfig:
    window_len: int = 40
    pre_samples: int = 8
    edges_per_frame: int = 8

    def __post_init__(self):
        if self.window_len < 1 or self.edges_per_frame < 1:
            raise FeatureError("window_len and edges_per_frame must be >= 1")
        if not 0 <= self.pre_samples < self.window_len:
            raise FeatureError("pre_samples must lie inside the window")

    @property
    def length(self) -> int:
        return self.window_len * self.edges_per_frame


@dataclass
class FeatureVector:
    values: np.ndarray
    ecu_claim: int
    ground_truth: Optional[str] = None

    def __len__(self) -> int:
        return len(self.values)


def normalize(values, lo: float, hi: float) -> np.ndarray:
    """Min-max map onto [0, 1], clamping anything outside [lo, hi]."""
    if hi <= lo:
        raise FeatureError(f"invalid normalization span [{lo}, {hi}]")
    x = np.asarray(values, dtype=np.float64)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def channel_samples(trace: RawTrace, mode: ChannelMode) -> np.ndarray:
    if mode == ChannelMode.CAN_H:
        return trace.can_h.astype(np.float64)
    if mode == ChannelMode.CAN_L:
        return trace.can_l.astype(np.float64)
    return trace.differential()


def bit_boundaries(trace: RawTrace, n_bits: int) -> np.ndarray:
    spb = trace.bit_time * trace.sample_rate
    return np.minimum(
        np.round(np.arange(n_bits + 1) * spb).astype(np.int64), len(trace)
    )


def quantize_bits(trace: RawTrace, threshold: float = CAN_H_BIT_THRESHOLD) -> np.ndarray:
    """Read the transmitted bit sequence off the sampled CAN-H waveform.

    Samples each bit cell at its midpoint: above the threshold is dominant
    (0), below is recessive (1).
    """
    n_bits = int(len(trace) / (trace.bit_time * trace.sample_rate) + 0.5)
    if n_bits < 1:
        raise FeatureError("trace shorter than one bit cell")
    bounds = bit_boundaries(trace, n_bits)
    mid = (bounds[:-1] + bounds[1:]) // 2
    mid = np.minimum(mid, len(trace) - 1)
    return (trace.can_h[mid] < threshold).astype(np.uint8)


def threshold_crossings(
    samples: np.ndarray, threshold: float, hysteresis: float = 0.1
) -> np.ndarray:
    """Indices where the signal crosses the threshold (with hysteresis).

    Fallback edge locator for traces whose bit grid is unknown.
    """
    x = np.asarray(samples, dtype=np.float64)
    state = x[0] > threshold
    crossings = []
    hi, lo = threshold + hysteresis, threshold - hysteresis
    for i in range(1, len(x)):
        if state and x[i] < lo:
            state = False
            crossings.append(i)
        elif not state and x[i] > hi:
            state = True
            crossings.append(i)
    return np.asarray(crossings, dtype=np.int64)


def frame_from_trace(trace: RawTrace) -> tuple[CanFrame, FieldMask, np.ndarray]:
    """Recover the frame, field mask and bit values from a sampled trace."""
    bits = quantize_bits(trace)
    frame, mask = parse_stream(StuffedBitstream(bits=bits, stuff_positions=()))
    return frame, mask, bits


def _select_edges(
    bits: np.ndarray,
    eligible: np.ndarray,
    rising_on_channel: np.ndarray,
    edges_per_frame: int,
) -> list[int]:
    """Pick the first edges, balancing rising and falling where available.

    Selection starts at the first rising eligible edge. Transitions strictly
    alternate on a binary signal, so this anchors every frame's window
    sequence to the same rising/falling pattern regardless of payload.
    """
    prev = np.concatenate(([1], bits[:-1]))
    transition_bits = np.nonzero((bits != prev) & eligible)[0]
    first_rising = next(
        (i for i, k in enumerate(transition_bits) if rising_on_channel[k]), 0
    )
    transition_bits = transition_bits[first_rising:]
    cap = (edges_per_frame + 1) // 2
    chosen: list[int] = []
    counts = {True: 0, False: 0}
    skipped: list[int] = []
    for k in transition_bits:
        pol = bool(rising_on_channel[k])
        if counts[pol] < cap and len(chosen) < edges_per_frame:
            chosen.append(int(k))
            counts[pol] += 1
        else:
            skipped.append(int(k))
    for k in skipped:  # top up with whatever polarity is left
        if len(chosen) >= edges_per_frame:
            break
        chosen.append(k)
    return sorted(chosen)


def extract_edges(
    trace: RawTrace,
    mask: FieldMask,
    mode: ChannelMode = ChannelMode.CAN_H,
    cfg: FeatureConfig = FeatureConfig(),
) -> FeatureVector:
    """Extract the concatenated, normalized edge windows of one trace.

    Edge instants come from the bit grid; bit values are read off the
    waveform, so the mask (from the encoder or from frame_from_trace) is the
    only side information needed. Rejects traces with fewer eligible
    transitions than cfg.edges_per_frame.
    """
    samples = channel_samples(trace, mode)
    n_bits = len(mask)
    bounds = bit_boundaries(trace, n_bits)
    bits = quantize_bits(trace)
    if len(bits) != n_bits:
        raise FeatureError(
            f"mask covers {n_bits} bits but trace holds {len(bits)} bit cells"
        )

    eligible = mask.eligible()
    # A dominant-going transition rises on CAN-H/differential, falls on CAN-L.
    going_dominant = bits == 0
    rising = going_dominant if mode != ChannelMode.CAN_L else ~going_dominant

    chosen = _select_edges(bits, eligible, rising, cfg.edges_per_frame)
    windows = []
    for k in chosen:
        start = int(bounds[k]) - cfg.pre_samples
        stop = start + cfg.window_len
        if start < 0 or stop > len(samples):
            continue
        windows.append(samples[start:stop])
    if len(windows) < cfg.edges_per_frame:
        raise FeatureError(
            f"only {len(windows)} eligible edges, need {cfg.edges_per_frame}"
        )

    lo, hi = NORMALIZATION_SPAN[mode]
    values = normalize(np.concatenate(windows[: cfg.edges_per_frame]), lo, hi)
    return FeatureVector(
        values=values, ecu_claim=trace.tx_id, ground_truth=trace.source_label
    )


def extract_from_trace(
    trace: RawTrace,
    mode: ChannelMode = ChannelMode.CAN_H,
    cfg: FeatureConfig = FeatureConfig(),
) -> FeatureVector:
    """Extract features from a bare trace, recovering the mask from it."""
    _, mask, _ = frame_from_trace(trace)
    return extract_edges(trace, mask, mode, cfg)


def feature_matrix(
    traces,
    mode: ChannelMode,
    cfg: FeatureConfig = FeatureConfig(),
    skip_bad: bool = False,
) -> tuple[np.ndarray, list[FeatureVector]]:
    """Extract features for many traces into one (n, L_f) matrix."""
    vecs = []
    for t in traces:
        try:
            vecs.append(extract_from_trace(t, mode, cfg))
        except FeatureError:
            if not skip_bad:
                raise
    if not vecs:
        raise FeatureError("no usable traces")
    x = np.stack([v.values for v in vecs])
    return x, vecs
