"""Deterministic stream derivation.

Every unit of Monte Carlo work (a chunk of replicas, one trajectory batch,
one replica box) gets its own Philox stream keyed by (master seed, index),
so results do not depend on how work is split across processes.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for the work unit ``index`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else int(rng))
