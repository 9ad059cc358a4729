"""Deterministic named random substreams derived from one run seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for a named stream; independent of other names' streams."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))


def spawn_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Per-index child seeds, stable regardless of consumption order."""
    return np.random.SeedSequence(seed).spawn(n)


def derive_seed(seed: int, name: str) -> int:
    """A plain integer seed derived from (seed, name), stable across runs."""
    tag = zlib.crc32(name.encode("utf-8"))
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])
