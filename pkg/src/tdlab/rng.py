"""Seed handling.

Every random stream in the package is a numpy ``Generator`` over PCG64,
seeded from a ``SeedSequence``. Per-run seeds are derived from
``(master_seed, run_index)`` through the SeedSequence hash, so a run's stream
does not depend on which worker executes it or in what order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def generator(seed: int, *key: int) -> np.random.Generator:
    """PCG64 generator for ``seed``, optionally split further by ``key``."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(master_seed: int, run_index: int) -> int:
    """64-bit seed for run ``run_index`` under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed) & _MASK64, spawn_key=(int(run_index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
