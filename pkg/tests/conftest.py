"""Shared fixtures: single-threaded BLAS and session-scoped trained models."""
import os

# Pin BLAS to one thread before numpy loads: keeps every run bit-reproducible
# and makes the timed acceptance criteria honest single-core measurements.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from canloc import bus
from canloc.features import ChannelMode, FeatureConfig, feature_matrix
from canloc.rng import substream


@pytest.fixture(scope="session")
def feature_cfg():
    return FeatureConfig()


def make_features(
    config,
    attacker: str,
    n_frames: int,
    seed: int,
    mode: ChannelMode,
    sample_rate: float,
    attacker_active: bool = False,
    spoof_target: str | None = None,
    noise_sigma: float = bus.DEFAULT_NOISE_SIGMA_V,
):
    """Generate traces for one network config and extract features."""
    topo = bus.build_network(config, bus.attacker_device(attacker))
    transmitters = None
    if attacker_active:
        transmitters = [t.point for t in topo.occupied() if t.occupant.attacker]
    schedule = bus.round_robin_schedule(
        topo,
        n_frames,
        substream(seed, "schedule"),
        transmitters=transmitters,
        spoof_target=spoof_target,
    )
    traces = bus.generate_dataset(topo, schedule, sample_rate, seed, noise_sigma=noise_sigma)
    x, vecs = feature_matrix(traces, mode)
    return x, vecs, traces
