"""Per-frame CAN-H/CAN-L waveform synthesis for a tapped two-wire bus.

The model is a parametric surrogate, not a transmission-line solver. Three
physical facts drive every downstream mechanism and are what the surrogate
is calibrated to produce:

  * each transmitter shapes its edges through its own drive constant and
    rail levels, so devices are tellable apart at one monitoring point;
  * the bus-wide drive constant scales with the capacitance of everything
    attached, so any added or swapped tap perturbs every device's signal;
  * each occupied tap echoes every edge back to the monitor with delays set
    by the tap/transmitter/monitor geometry, so the perturbation encodes
    where the new tap sits.

Each edge is a first-order exponential toward the target rail. Every other
occupied tap contributes two delayed damped rings: the tap scatter path
(tap-to-transmitter plus tap-to-monitor) and the re-reflection off the
transmitter's output impedance (transmitter-to-tap round trip plus the
direct run to the monitor). Both paths are needed: taps sitting between the
transmitter and the monitor share identical scatter delays, and only the
round-trip echo separates them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

from .frames import CanFrame, StuffedBitstream, encode_frame

POINT_LABELS = "ABCDEFGHIJ"
LEGIT_POINTS = ("A", "C", "E", "G", "I")
OPEN_POINTS = ("B", "D", "F", "H", "J")

TAP_SPACING_M = 0.5
DEFAULT_TERMINATION_OHM = 120.0
DEFAULT_VELOCITY_M_S = 2.0e8
DEFAULT_BIT_TIME_S = 2e-6  # 500 kbit/s
DEFAULT_NOISE_SIGMA_V = 0.005

# Coupling gain between summed tap capacitance and the edge time constant
# (0.15 per nanofarad of attached capacitance).
KAPPA_PER_FARAD = 0.15e9

DETECTION_SAMPLE_RATE = 125e6
LOCALIZATION_SAMPLE_RATE = 500e6
AUTHENTICATION_SAMPLE_RATE = 500e6


class BusError(Exception):
    """Base error for bus construction and synthesis."""


class EmptyTapError(BusError):
    """Transmission was requested from an unoccupied tap."""


@dataclass(frozen=True)
class EcuElectricalParams:
    """Transceiver electrical profile seen from the bus."""

    v_h_dom: float
    v_l_dom: float
    v_rec: float
    tau_drive: float
    z_out: float
    c_tap: float
    ring_amp: float
    ring_freq: float
    ring_damp: float

    def __post_init__(self):
        if not self.v_h_dom > self.v_rec > self.v_l_dom:
            raise BusError("rails must satisfy v_h_dom > v_rec > v_l_dom")
        diff = self.v_h_dom - self.v_l_dom
        if not 0.9 <= diff <= 2.0:
            raise BusError(f"dominant differential {diff:.3f} V outside 0.9-2.0 V")
        for name in ("tau_drive", "z_out", "c_tap", "ring_freq", "ring_damp"):
            if getattr(self, name) <= 0:
                raise BusError(f"{name} must be positive")


@dataclass(frozen=True)
class EcuDevice:
    """A named device (legitimate ECU or adversary) that can occupy a tap."""

    name: str
    params: EcuElectricalParams
    attacker: bool = False


@dataclass(frozen=True)
class Tap:
    point: str
    position: float
    occupant: Optional[EcuDevice] = None


@dataclass(frozen=True)
class BusTopology:
    """Ten-tap bus with one monitoring point and terminated ends."""

    taps: tuple[Tap, ...]
    monitor_position: float = 0.0
    termination: float = DEFAULT_TERMINATION_OHM
    propagation_velocity: float = DEFAULT_VELOCITY_M_S
    name: str = ""

    def __post_init__(self):
        points = [t.point for t in self.taps]
        if points != list(POINT_LABELS):
            raise BusError(f"expected taps A..J in order, got {points}")
        positions = [t.position for t in self.taps]
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise BusError("tap positions must be strictly increasing")

    def tap(self, point: str) -> Tap:
        idx = POINT_LABELS.find(point)
        if idx < 0:
            raise BusError(f"unknown tap point {point!r}")
        return self.taps[idx]

    def occupied(self) -> tuple[Tap, ...]:
        return tuple(t for t in self.taps if t.occupant is not None)

    def occupant_names(self) -> tuple[str, ...]:
        return tuple(t.occupant.name for t in self.occupied())

    def device_at(self, point: str) -> EcuDevice:
        tap = self.tap(point)
        if tap.occupant is None:
            raise EmptyTapError(f"tap {point} is unoccupied")
        return tap.occupant

    def point_of(self, device_name: str) -> str:
        for t in self.occupied():
            if t.occupant.name == device_name:
                return t.point
        raise BusError(f"no device named {device_name!r} on the bus")


@dataclass(frozen=True)
class CommonModeInterference:
    """Duty-cycled switching noise coupled equally into both bus lines.

    Vehicle buses see broadband interference from PWM supplies and motor
    drivers that is common mode: it rides on CAN-H and CAN-L alike and
    cancels in the differential, which is exactly why differential
    sampling is the robust channel for authentication. Frames overlapping
    an active interval (most of them) carry a much higher single-ended
    noise level than the quiet minority.
    """

    duty: float = 0.85
    level: float = 0.035
    jitter: float = 0.003

    def __post_init__(self):
        if not 0.0 <= self.duty <= 1.0:
            raise BusError("interference duty must lie in [0, 1]")
        if self.level < 0 or self.jitter < 0:
            raise BusError("interference level and jitter must be >= 0")


DEFAULT_INTERFERENCE = CommonModeInterference()


@dataclass(frozen=True)
class RawTrace:
    """Sampled CAN-H/CAN-L waveforms of one frame at the monitor.

    Samples are float32 so a trace survives file round trips bit-exactly.
    """

    can_h: np.ndarray
    can_l: np.ndarray
    sample_rate: float
    bit_time: float
    tx_id: int
    source_label: str
    config_tag: str = ""
    is_attacker: bool = False

    def __post_init__(self):
        if len(self.can_h) != len(self.can_l):
            raise BusError("CAN-H and CAN-L sample counts differ")

    def __len__(self) -> int:
        return len(self.can_h)

    def differential(self) -> np.ndarray:
        return self.can_h.astype(np.float64) - self.can_l.astype(np.float64)


_LEGIT_NOMINAL = dict(
    v_h_dom=3.45,
    v_l_dom=1.55,
    v_rec=2.5,
    tau_drive=60e-9,
    z_out=25.0,
    c_tap=25e-12,
    ring_amp=0.12,
    ring_freq=36e6,
    ring_damp=60e-9,
)


def sample_legit_params(rng: np.random.Generator) -> EcuElectricalParams:
    """Draw one device from the legitimate family's jitter distribution.

    Same-batch transceivers still differ: +-3% drive constant, +-1% rails,
    an individual ring frequency, and small spread on the remaining values.
    """
    n = _LEGIT_NOMINAL
    return EcuElectricalParams(
        v_h_dom=n["v_h_dom"] * (1 + rng.uniform(-0.01, 0.01)),
        v_l_dom=n["v_l_dom"] * (1 + rng.uniform(-0.01, 0.01)),
        v_rec=n["v_rec"],
        tau_drive=n["tau_drive"] * (1 + rng.uniform(-0.03, 0.03)),
        z_out=n["z_out"] * (1 + rng.uniform(-0.05, 0.05)),
        c_tap=n["c_tap"] * (1 + rng.uniform(-0.05, 0.05)),
        ring_amp=n["ring_amp"] * (1 + rng.uniform(-0.10, 0.10)),
        ring_freq=rng.uniform(30e6, 45e6),
        ring_damp=n["ring_damp"] * (1 + rng.uniform(-0.05, 0.05)),
    )


_FAMILY_SEED = 0x51_6E_A1


def default_legit_devices() -> tuple[EcuDevice, ...]:
    """The five stock ECUs L1..L5 (fixed draws from the jitter family)."""
    from .rng import substream

    import dataclasses

    devices = []
    for i in range(1, 6):
        g = substream(_FAMILY_SEED, f"L{i}")
        params = sample_legit_params(g)
        # Spread the ring frequencies deterministically so the stock roster
        # never lands two devices on top of each other.
        params = dataclasses.replace(params, ring_freq=30e6 + 3.4e6 * (i - 1))
        devices.append(EcuDevice(name=f"L{i}", params=params))
    return tuple(devices)


_ATTACKER_PARAMS = {
    "A1": EcuElectricalParams(
        v_h_dom=3.48,
        v_l_dom=1.53,
        v_rec=2.5,
        tau_drive=85e-9,
        z_out=65.0,
        c_tap=60e-12,
        ring_amp=0.30,
        ring_freq=22e6,
        ring_damp=150e-9,
    ),
    # A sibling part from the same adversary family: clearly separated from
    # the legitimate transceivers, close enough to A1 that location cues
    # carry across devices.
    "A2": EcuElectricalParams(
        v_h_dom=3.43,
        v_l_dom=1.57,
        v_rec=2.5,
        tau_drive=92e-9,
        z_out=50.0,
        c_tap=66e-12,
        ring_amp=0.285,
        ring_freq=23.2e6,
        ring_damp=142e-9,
    ),
}


def attacker_device(name: str = "A1") -> EcuDevice:
    """Adversary hardware profile: a different transceiver family."""
    try:
        return EcuDevice(name=name, params=_ATTACKER_PARAMS[name], attacker=True)
    except KeyError:
        raise BusError(f"unknown attacker profile {name!r}") from None


# Tap assignment per network configuration: (replaced legit point, insertion
# point). Nw0 is clean, Nw1-3 replace A/E/I, Nw4-8 insert at B/D/F/H/J.
_CONFIG_TABLE: dict[int, tuple[Optional[str], Optional[str]]] = {
    0: (None, None),
    1: ("A", None),
    2: ("E", None),
    3: ("I", None),
    4: (None, "B"),
    5: (None, "D"),
    6: (None, "F"),
    7: (None, "H"),
    8: (None, "J"),
}


def parse_network_config(config) -> int:
    if isinstance(config, str):
        c = config.strip().upper()
        if c.startswith("NW"):
            c = c[2:]
        if not c.isdigit():
            raise BusError(f"invalid network config {config!r}")
        config = int(c)
    if config not in _CONFIG_TABLE:
        raise BusError(f"network config Nw{config} does not exist (Nw0..Nw8)")
    return config


def insertion_point_of(config) -> Optional[str]:
    """The open tap the attacker occupies in this config (Nw4..Nw8)."""
    return _CONFIG_TABLE[parse_network_config(config)][1]


def replaced_point_of(config) -> Optional[str]:
    """The legitimate tap the attacker usurps in this config (Nw1..Nw3)."""
    return _CONFIG_TABLE[parse_network_config(config)][0]


def build_network(
    config,
    attacker: Optional[EcuDevice] = None,
    legit: Optional[Sequence[EcuDevice]] = None,
) -> BusTopology:
    """Build one of the nine experiment topologies Nw0..Nw8."""
    cfg = parse_network_config(config)
    if attacker is None:
        attacker = attacker_device("A1")
    if legit is None:
        legit = default_legit_devices()
    if len(legit) != len(LEGIT_POINTS):
        raise BusError(f"need {len(LEGIT_POINTS)} legitimate devices")

    replaced, inserted = _CONFIG_TABLE[cfg]
    by_point: dict[str, EcuDevice] = dict(zip(LEGIT_POINTS, legit))
    if replaced is not None:
        by_point[replaced] = attacker
    if inserted is not None:
        by_point[inserted] = attacker

    taps = tuple(
        Tap(point=p, position=i * TAP_SPACING_M, occupant=by_point.get(p))
        for i, p in enumerate(POINT_LABELS)
    )
    return BusTopology(taps=taps, name=f"Nw{cfg}")


@lru_cache(maxsize=256)
def _edge_kernel(
    topology: BusTopology, tx_point: str, sample_rate: float
) -> tuple[np.ndarray, np.ndarray]:
    """Additive kernel for one recessive->dominant edge at the monitor.

    The dominant->recessive kernel is the exact negation, so one pair of
    arrays (CAN-H, CAN-L) covers both polarities of every transition of a
    given transmitter on a given topology.
    """
    tx = topology.device_at(tx_point)
    p = tx.params
    occupied = topology.occupied()
    x_tx = topology.tap(tx_point).position
    x_mon = topology.monitor_position
    v = topology.propagation_velocity

    c_total = sum(t.occupant.params.c_tap for t in occupied)
    tau_eff = p.tau_drive * (1 + KAPPA_PER_FARAD * c_total)
    gamma_tx = abs(p.z_out - topology.termination) / (p.z_out + topology.termination)

    echoes = []  # (delay, scale, ring params)
    horizon = 6 * tau_eff
    for t in occupied:
        if t.point == tx_point:
            continue
        q = t.occupant.params
        d_scatter = (abs(t.position - x_tx) + abs(t.position - x_mon)) / v
        d_bounce = (2 * abs(t.position - x_tx) + abs(x_tx - x_mon)) / v
        echoes.append((d_scatter, 1.0, q))
        echoes.append((d_bounce, gamma_tx, q))
        horizon = max(horizon, d_bounce + 6 * q.ring_damp, d_scatter + 6 * q.ring_damp)

    n = int(math.ceil(horizon * sample_rate)) + 1
    t_axis = np.arange(n) / sample_rate
    kern_h = (p.v_rec - p.v_h_dom) * np.exp(-t_axis / tau_eff)
    kern_l = (p.v_rec - p.v_l_dom) * np.exp(-t_axis / tau_eff)
    for delay, scale, q in echoes:
        tt = t_axis - delay
        live = tt >= 0
        ring = np.zeros(n)
        ring[live] = (
            scale
            * q.ring_amp
            * np.exp(-tt[live] / q.ring_damp)
            * np.sin(2 * math.pi * q.ring_freq * tt[live])
        )
        kern_h += ring
        kern_l -= ring
    return kern_h, kern_l


def synth_frame_waveform(
    topology: BusTopology,
    tx: str,
    stream: StuffedBitstream,
    sample_rate: float,
    noise_sigma: float = DEFAULT_NOISE_SIGMA_V,
    rng_seed=0,
    bit_time: float = DEFAULT_BIT_TIME_S,
    tx_id: Optional[int] = None,
    interference: Optional[CommonModeInterference] = DEFAULT_INTERFERENCE,
) -> RawTrace:
    """Synthesize the frame waveform seen at the monitor tap.

    Deterministic for a fixed rng_seed; rng_seed may be an int or a numpy
    SeedSequence. Noise has two parts: independent per-line Gaussian noise
    of sigma noise_sigma, and (unless disabled) duty-cycled common-mode
    interference hitting both lines identically. Setting noise_sigma to 0
    disables both.
    """
    device = topology.device_at(tx)  # raises EmptyTapError
    p = device.params

    bits = np.asarray(stream.bits, dtype=np.uint8)
    n_bits = len(bits)
    n = int(math.ceil(n_bits * bit_time * sample_rate))
    spb = bit_time * sample_rate
    bounds = np.minimum(np.round(np.arange(n_bits + 1) * spb).astype(np.int64), n)

    # Ideal rail levels per bit cell (bit 1 recessive, bit 0 dominant).
    h_levels = np.where(bits == 1, p.v_rec, p.v_h_dom)
    l_levels = np.where(bits == 1, p.v_rec, p.v_l_dom)
    cell_len = np.diff(bounds)
    h = np.repeat(h_levels, cell_len)
    l = np.repeat(l_levels, cell_len)

    kern_h, kern_l = _edge_kernel(topology, tx, sample_rate)
    klen = len(kern_h)

    prev = np.concatenate(([1], bits[:-1]))  # bus idles recessive before SOF
    for k in np.nonzero(bits != prev)[0]:
        b0 = bounds[k]
        span = min(klen, n - b0)
        if span <= 0:
            continue
        if bits[k] == 0:  # recessive -> dominant
            h[b0 : b0 + span] += kern_h[:span]
            l[b0 : b0 + span] += kern_l[:span]
        else:
            h[b0 : b0 + span] -= kern_h[:span]
            l[b0 : b0 + span] -= kern_l[:span]

    if noise_sigma > 0:
        gen = np.random.Generator(np.random.PCG64(rng_seed))
        if interference is not None and interference.level > 0:
            active = gen.random() < interference.duty
            if active:
                lvl = interference.level * (
                    1 + gen.uniform(-interference.jitter, interference.jitter)
                )
                common = gen.normal(0.0, lvl, n)
                h = h + common
                l = l + common
        h = h + gen.normal(0.0, noise_sigma, n)
        l = l + gen.normal(0.0, noise_sigma, n)

    return RawTrace(
        can_h=h.astype(np.float32),
        can_l=l.astype(np.float32),
        sample_rate=sample_rate,
        bit_time=bit_time,
        tx_id=tx_id if tx_id is not None else -1,
        source_label=device.name,
        config_tag=topology.name,
        is_attacker=device.attacker,
    )


def generate_dataset(
    topology: BusTopology,
    schedule: Sequence[tuple[str, CanFrame]],
    sample_rate: float,
    seed: int,
    noise_sigma: float = DEFAULT_NOISE_SIGMA_V,
    bit_time: float = DEFAULT_BIT_TIME_S,
    interference: Optional[CommonModeInterference] = DEFAULT_INTERFERENCE,
) -> list[RawTrace]:
    """Synthesize one trace per scheduled (tap point, frame) entry.

    Per-trace seeds are derived from the root seed by index, so the result
    is identical no matter how generation is ordered or parallelized.
    """
    children = np.random.SeedSequence(seed).spawn(len(schedule))
    traces = []
    for (tx, frame), child in zip(schedule, children):
        stream, _ = encode_frame(frame)
        traces.append(
            synth_frame_waveform(
                topology,
                tx,
                stream,
                sample_rate,
                noise_sigma=noise_sigma,
                rng_seed=child,
                bit_time=bit_time,
                tx_id=frame.id,
                interference=interference,
            )
        )
    return traces


DEFAULT_ID_TABLE = {
    "L1": 0x101,
    "L2": 0x102,
    "L3": 0x103,
    "L4": 0x104,
    "L5": 0x105,
    "A1": 0x1F0,
    "A2": 0x1F0,
}


def round_robin_schedule(
    topology: BusTopology,
    n_frames: int,
    rng: np.random.Generator,
    dlc: int = 2,
    transmitters: Optional[Iterable[str]] = None,
    id_table: Optional[dict[str, int]] = None,
    spoof_target: Optional[str] = None,
) -> list[tuple[str, CanFrame]]:
    """Round-robin schedule over occupied taps with random payloads.

    By default only non-attacker occupants transmit. When the attacker is
    included it claims its own identifier, or spoof_target's identifier if
    one is named.
    """
    ids = dict(DEFAULT_ID_TABLE if id_table is None else id_table)
    occupied = topology.occupied()
    if transmitters is None:
        points = [t.point for t in occupied if not t.occupant.attacker]
    else:
        points = list(transmitters)
    if not points:
        raise BusError("no transmitters selected")

    schedule = []
    for i in range(n_frames):
        point = points[i % len(points)]
        device = topology.device_at(point)
        if device.attacker and spoof_target is not None:
            frame_id = ids[spoof_target]
        else:
            frame_id = ids[device.name]
        data = bytes(rng.integers(0, 256, size=dlc, dtype=np.uint8).tolist())
        schedule.append((point, CanFrame(id=frame_id, dlc=dlc, data=data)))
    return schedule
