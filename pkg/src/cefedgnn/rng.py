"""Deterministic random stream derivation.

Every source of randomness in the simulator is a numpy Generator derived
from one master seed plus an integer path (domain tag, client, round,
step).  Streams are independent of each other and of the order in which
they are created, so sequential and parallel execution of clients sample
identically.
"""

from __future__ import annotations

import numpy as np

# domain tags, one per independent consumer of randomness
DOMAIN_SAMPLING = 0
DOMAIN_INIT = 1
DOMAIN_NOISE = 2
DOMAIN_DATAGEN = 3
DOMAIN_SPLIT = 4
DOMAIN_ATTACK = 5


def stream(master_seed: int, *path: int) -> np.random.Generator:
    """Derive an independent Generator for (master_seed, path).

    `path` entries must be non-negative integers.
    """
    if any(p < 0 for p in path):
        raise ValueError(f"negative stream path component: {path}")
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(path))
    return np.random.default_rng(ss)


def sampling_stream(master_seed: int, client: int, round_idx: int, step_idx: int) -> np.random.Generator:
    return stream(master_seed, DOMAIN_SAMPLING, client, round_idx, step_idx)


def noise_stream(master_seed: int, round_idx: int) -> np.random.Generator:
    return stream(master_seed, DOMAIN_NOISE, round_idx)


def init_stream(master_seed: int) -> np.random.Generator:
    return stream(master_seed, DOMAIN_INIT)


def split_stream(master_seed: int) -> np.random.Generator:
    return stream(master_seed, DOMAIN_SPLIT)
