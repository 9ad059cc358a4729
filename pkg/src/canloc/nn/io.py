"""Versioned binary model files.

Layout (all little-endian): magic "CLOC", u16 format version, u16 layer
count; per layer a kind tag, a JSON config blob and the layer's state
arrays as 64-bit IEEE-754; then a trailing JSON metadata blob (feature
length, channel mode, threshold and class order where applicable).
"""
from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .layers import LayerSpec, NnError
from .model import Sequential

MAGIC = b"CLOC"
FORMAT_VERSION = 1

_KIND_IDS = {
    "dense": 1,
    "conv1d": 2,
    "maxpool1d": 3,
    "batchnorm": 4,
    "dropout": 5,
    "activation": 6,
}
_KIND_NAMES = {v: k for k, v in _KIND_IDS.items()}


class ModelFormatError(NnError):
    """File is not a valid model container."""


def _write_array(fh: BinaryIO, a: np.ndarray):
    a = np.asarray(a, dtype="<f8")
    fh.write(struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes(order="C"))


def _read_array(fh: BinaryIO) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _take(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _take(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_take(fh, 8 * count), dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def _take(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelFormatError("model file truncated")
    return buf


def save_model(path, model: Sequential, metadata: dict | None = None):
    meta = dict(metadata or {})
    meta["__input_shape__"] = list(model.input_shape)
    meta["__seed__"] = model.seed
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", FORMAT_VERSION, len(model.layers)))
        for layer in model.layers:
            cfg = json.dumps(layer.spec.config(), sort_keys=True).encode()
            fh.write(struct.pack("<BI", _KIND_IDS[layer.spec.kind], len(cfg)))
            fh.write(cfg)
            arrays = layer.state_arrays()
            fh.write(struct.pack("<B", len(arrays)))
            for a in arrays:
                _write_array(fh, a)
        blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_model(path) -> tuple[Sequential, dict]:
    with open(path, "rb") as fh:
        if _take(fh, 4) != MAGIC:
            raise ModelFormatError("bad magic, not a model file")
        version, n_layers = struct.unpack("<HH", _take(fh, 4))
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format version {version}")
        specs = []
        states = []
        for _ in range(n_layers):
            kind_id, cfg_len = struct.unpack("<BI", _take(fh, 5))
            if kind_id not in _KIND_NAMES:
                raise ModelFormatError(f"unknown layer kind id {kind_id}")
            cfg = json.loads(_take(fh, cfg_len).decode())
            if cfg.pop("kind") != _KIND_NAMES[kind_id]:
                raise ModelFormatError("layer kind tag/config mismatch")
            specs.append(LayerSpec(kind=_KIND_NAMES[kind_id], **cfg))
            (n_arrays,) = struct.unpack("<B", _take(fh, 1))
            states.append([_read_array(fh) for _ in range(n_arrays)])
        (meta_len,) = struct.unpack("<I", _take(fh, 4))
        meta = json.loads(_take(fh, meta_len).decode())

    input_shape = tuple(meta.pop("__input_shape__"))
    seed = int(meta.pop("__seed__", 0))
    model = Sequential(specs, input_shape, seed=seed)
    for layer, arrays in zip(model.layers, states):
        layer.load_state(arrays)
    return model, meta
