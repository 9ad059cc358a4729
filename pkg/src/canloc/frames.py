"""Bit-level encoding of standard CAN 2.0A data frames.

Produces the stuffed bitstream a transceiver would drive on the wire plus a
per-bit field mask, so waveform sampling can be restricted to the fields that
only the transmitter drives (control, data and CRC).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

# CRC-15-CAN generator x^15+x^14+x^10+x^8+x^7+x^4+x^3+1, register seeded to 0.
CRC15_POLY = 0x4599
_CRC15_GENERATOR = (1 << 15) | CRC15_POLY  # full 16-bit divisor

MAX_STANDARD_ID = 1 << 11
MAX_DLC = 8
EOF_BITS = 7


class Field(IntEnum):
    SOF = 0
    ID = 1
    RTR = 2
    IDE = 3
    RESERVED = 4
    DLC = 5
    DATA = 6
    CRC = 7
    CRC_DELIM = 8
    ACK = 9
    ACK_DELIM = 10
    EOF = 11
    STUFF = 12


# Only the transmitter drives these fields, so they are safe to fingerprint.
ELIGIBLE_FIELDS = frozenset(
    {Field.IDE, Field.RESERVED, Field.DLC, Field.DATA, Field.CRC}
)


class CanError(Exception):
    """Base error for CAN frame handling."""


class FrameFormatError(CanError):
    """A CanFrame violates the standard-frame invariants."""


class DecodeError(CanError):
    """Base error for failed bitstream decoding."""


class StuffingViolation(DecodeError):
    """Six identical consecutive bits inside the stuffed region."""


class CrcMismatch(DecodeError):
    """Transmitted CRC field does not match the recomputed CRC."""


class MalformedFrame(DecodeError):
    """Frame structure (SOF/IDE/delimiters/EOF/length) is invalid."""


@dataclass(frozen=True)
class CanFrame:
    """A standard (11-bit identifier) CAN data or remote frame."""

    id: int
    dlc: int = 0
    data: bytes = b""
    rtr: bool = False

    def __post_init__(self):
        if not 0 <= self.id < MAX_STANDARD_ID:
            raise FrameFormatError(f"identifier {self.id:#x} needs more than 11 bits")
        if not 0 <= self.dlc <= MAX_DLC:
            raise FrameFormatError(f"dlc {self.dlc} outside 0..8")
        if self.rtr:
            if self.data:
                raise FrameFormatError("remote frames carry no data")
        elif len(self.data) != self.dlc:
            raise FrameFormatError(
                f"data length {len(self.data)} does not match dlc {self.dlc}"
            )


@dataclass(frozen=True)
class StuffedBitstream:
    """Wire-level bit sequence from SOF through EOF, stuff bits included."""

    bits: np.ndarray
    stuff_positions: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.bits)


@dataclass(frozen=True)
class FieldMask:
    """Per-bit field labels aligned with a stuffed bitstream."""

    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def effective_labels(self) -> np.ndarray:
        """Labels with stuff bits resolved to the field they interrupt."""
        eff = self.labels.copy()
        for i in np.nonzero(eff == Field.STUFF)[0]:
            eff[i] = eff[i - 1]
        return eff

    def eligible(self) -> np.ndarray:
        """Boolean mask of bits safe to fingerprint (control/data/CRC)."""
        eff = self.effective_labels()
        out = np.zeros(len(eff), dtype=bool)
        for f in ELIGIBLE_FIELDS:
            out |= eff == f
        return out


def crc15(bits) -> int:
    """CRC-15 of a bit sequence, as polynomial long division over GF(2)."""
    bits = np.asarray(bits, dtype=np.uint8)
    n = len(bits)
    dividend = 0
    for b in bits:
        dividend = (dividend << 1) | int(b)
    dividend <<= 15
    for i in range(n - 1, -1, -1):
        if dividend >> (i + 15) & 1:
            dividend ^= _CRC15_GENERATOR << i
    return dividend & 0x7FFF


def _int_bits(value: int, width: int) -> list[int]:
    return [(value >> i) & 1 for i in range(width - 1, -1, -1)]


def _stuff(bits: list[int], labels: list[int]):
    """Insert a complement bit after every run of five identical bits."""
    out_bits: list[int] = []
    out_labels: list[int] = []
    positions: list[int] = []
    run_val = -1
    run_len = 0
    for b, lab in zip(bits, labels):
        out_bits.append(b)
        out_labels.append(lab)
        if b == run_val:
            run_len += 1
        else:
            run_val, run_len = b, 1
        if run_len == 5:
            positions.append(len(out_bits))
            out_bits.append(1 - b)
            out_labels.append(Field.STUFF)
            run_val, run_len = 1 - b, 1
    return out_bits, out_labels, positions


def encode_frame(frame: CanFrame) -> tuple[StuffedBitstream, FieldMask]:
    """Encode a frame to the stuffed wire bitstream and its field mask.

    Layout: SOF, 11 ID bits MSB first, RTR, IDE, reserved, 4 DLC bits,
    data bytes MSB first, CRC-15, then the unstuffed tail (CRC delimiter,
    recessive ACK slot, ACK delimiter, 7 EOF bits).
    """
    bits: list[int] = [0]
    labels: list[int] = [Field.SOF]

    bits += _int_bits(frame.id, 11)
    labels += [Field.ID] * 11
    bits.append(1 if frame.rtr else 0)
    labels.append(Field.RTR)
    bits.append(0)  # IDE dominant: standard identifier
    labels.append(Field.IDE)
    bits.append(0)  # reserved r0, transmitted dominant
    labels.append(Field.RESERVED)
    bits += _int_bits(frame.dlc, 4)
    labels += [Field.DLC] * 4
    if not frame.rtr:
        for byte in frame.data:
            bits += _int_bits(byte, 8)
        labels += [Field.DATA] * (8 * frame.dlc)

    crc = crc15(bits)
    bits += _int_bits(crc, 15)
    labels += [Field.CRC] * 15

    stuffed, stuffed_labels, positions = _stuff(bits, labels)

    # ACK slot is emitted recessive by the transmitter; receivers are not
    # modeled, so it stays recessive on the simulated wire.
    tail_bits = [1, 1, 1] + [1] * EOF_BITS
    tail_labels = [Field.CRC_DELIM, Field.ACK, Field.ACK_DELIM] + [Field.EOF] * EOF_BITS

    stream = StuffedBitstream(
        bits=np.array(stuffed + tail_bits, dtype=np.uint8),
        stuff_positions=tuple(positions),
    )
    mask = FieldMask(labels=np.array(stuffed_labels + tail_labels, dtype=np.uint8))
    return stream, mask


class _Destuffer:
    """Sequential reader removing stuff bits and checking the 5-bit rule."""

    def __init__(self, bits: np.ndarray):
        self.bits = bits
        self.pos = 0
        self.run_val = -1
        self.run_len = 0
        self.stuff_positions: list[int] = []

    def _raw_next(self) -> int:
        if self.pos >= len(self.bits):
            raise MalformedFrame("bitstream truncated")
        b = int(self.bits[self.pos])
        self.pos += 1
        return b

    def next(self) -> int:
        b = self._raw_next()
        if b == self.run_val:
            self.run_len += 1
        else:
            self.run_val, self.run_len = b, 1
        if self.run_len == 5:
            sb = self._raw_next()
            if sb == b:
                raise StuffingViolation(
                    f"six identical bits ending at position {self.pos - 1}"
                )
            self.stuff_positions.append(self.pos - 1)
            self.run_val, self.run_len = sb, 1
        return b


def parse_stream(stream: StuffedBitstream) -> tuple[CanFrame, FieldMask]:
    """Parse a stuffed bitstream back into a frame and its field mask.

    Raises StuffingViolation, CrcMismatch or MalformedFrame. The returned
    mask is identical to the one produced by encode_frame for valid streams.
    """
    bits = np.asarray(stream.bits, dtype=np.uint8)
    reader = _Destuffer(bits)

    unstuffed: list[int] = []

    def take(n: int) -> list[int]:
        got = [reader.next() for _ in range(n)]
        unstuffed.extend(got)
        return got

    def as_int(seq: list[int]) -> int:
        v = 0
        for b in seq:
            v = (v << 1) | b
        return v

    if take(1)[0] != 0:
        raise MalformedFrame("SOF must be dominant")
    ident = as_int(take(11))
    rtr = bool(take(1)[0])
    if take(1)[0] != 0:
        raise MalformedFrame("extended identifiers are unsupported")
    take(1)  # reserved
    dlc = as_int(take(4))
    if dlc > MAX_DLC:
        raise MalformedFrame(f"dlc {dlc} outside 0..8")
    data = b""
    if not rtr:
        data = bytes(as_int(take(8)) for _ in range(dlc))
    payload_end = len(unstuffed)
    crc_read = as_int(take(15))
    crc_calc = crc15(unstuffed[:payload_end])
    if crc_read != crc_calc:
        raise CrcMismatch(f"crc {crc_read:#06x} != computed {crc_calc:#06x}")

    # Tail is never stuffed: CRC delimiter, ACK slot, ACK delimiter, EOF.
    tail_start = reader.pos
    tail = bits[tail_start:]
    if len(tail) != 3 + EOF_BITS:
        raise MalformedFrame(f"expected {3 + EOF_BITS} tail bits, got {len(tail)}")
    if tail[0] != 1 or tail[2] != 1:
        raise MalformedFrame("CRC/ACK delimiters must be recessive")
    if not np.all(tail[3:] == 1):
        raise MalformedFrame("EOF must be seven recessive bits")

    frame = CanFrame(id=ident, dlc=dlc, data=data, rtr=rtr)
    _, mask = encode_frame(frame)
    if len(mask) != len(bits):
        raise MalformedFrame("stream length inconsistent with decoded frame")
    return frame, mask


def decode_frame(stream: StuffedBitstream) -> CanFrame:
    """Inverse of encode_frame (validating stuffing, CRC and framing)."""
    frame, _ = parse_stream(stream)
    return frame
