"""Binary trace container ("CTRC"): header plus per-trace sample arrays.

Little-endian layout. Header: magic, u16 version, f64 sample rate, f64 bit
time, u8 channel-availability flags (bit 0 CAN-H, bit 1 CAN-L), u32 trace
count. Per trace: u16 CAN id, length-prefixed source label, u8 attacker
flag, length-prefixed network config tag, u32 sample counts for each
channel, then the CAN-H and CAN-L arrays as 32-bit IEEE-754.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .bus import RawTrace

MAGIC = b"CTRC"
FORMAT_VERSION = 1

CHANNEL_H_FLAG = 0x01
CHANNEL_L_FLAG = 0x02


class TraceFileError(Exception):
    pass


def _take(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TraceFileError("trace file truncated")
    return buf


def _write_label(fh: BinaryIO, text: str):
    raw = text.encode("utf-8")
    if len(raw) > 255:
        raise TraceFileError(f"label too long: {text!r}")
    fh.write(struct.pack("<B", len(raw)))
    fh.write(raw)


def _read_label(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<B", _take(fh, 1))
    return _take(fh, n).decode("utf-8")


def write_traces(path, traces: Sequence[RawTrace]):
    if not traces:
        raise TraceFileError("refusing to write an empty trace file")
    rate = traces[0].sample_rate
    bit_time = traces[0].bit_time
    for t in traces:
        if t.sample_rate != rate or t.bit_time != bit_time:
            raise TraceFileError("all traces in a file share one rate and bit time")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<dd", rate, bit_time))
        fh.write(struct.pack("<B", CHANNEL_H_FLAG | CHANNEL_L_FLAG))
        fh.write(struct.pack("<I", len(traces)))
        for t in traces:
            fh.write(struct.pack("<H", t.tx_id & 0x7FF))
            _write_label(fh, t.source_label)
            fh.write(struct.pack("<B", 1 if t.is_attacker else 0))
            _write_label(fh, t.config_tag)
            fh.write(struct.pack("<II", len(t.can_h), len(t.can_l)))
            fh.write(np.asarray(t.can_h, dtype="<f4").tobytes())
            fh.write(np.asarray(t.can_l, dtype="<f4").tobytes())


def read_traces(path) -> list[RawTrace]:
    with open(path, "rb") as fh:
        if _take(fh, 4) != MAGIC:
            raise TraceFileError(f"{path}: bad magic, not a trace file")
        (version,) = struct.unpack("<H", _take(fh, 2))
        if version != FORMAT_VERSION:
            raise TraceFileError(f"{path}: unsupported version {version}")
        rate, bit_time = struct.unpack("<dd", _take(fh, 16))
        (flags,) = struct.unpack("<B", _take(fh, 1))
        if not flags & CHANNEL_H_FLAG or not flags & CHANNEL_L_FLAG:
            raise TraceFileError("both channels are required by this build")
        (count,) = struct.unpack("<I", _take(fh, 4))
        traces = []
        for _ in range(count):
            (tx_id,) = struct.unpack("<H", _take(fh, 2))
            label = _read_label(fh)
            (attacker,) = struct.unpack("<B", _take(fh, 1))
            tag = _read_label(fh)
            n_h, n_l = struct.unpack("<II", _take(fh, 8))
            can_h = np.frombuffer(_take(fh, 4 * n_h), dtype="<f4").copy()
            can_l = np.frombuffer(_take(fh, 4 * n_l), dtype="<f4").copy()
            traces.append(
                RawTrace(
                    can_h=can_h,
                    can_l=can_l,
                    sample_rate=rate,
                    bit_time=bit_time,
                    tx_id=tx_id,
                    source_label=label,
                    config_tag=tag,
                    is_attacker=bool(attacker),
                )
            )
        if fh.read(1):
            raise TraceFileError(f"{path}: trailing bytes after declared traces")
    return traces
