"""Counter-based RNG streams.

Every source of randomness in the package draws from its own Philox stream,
keyed by ``(base_seed, run_index, purpose)``. The derivation rule is

    SeedSequence(entropy=base_seed, spawn_key=(run_index, PURPOSES[purpose]))

so streams are independent across runs and purposes, reproducible across
processes, and insensitive to execution order (Philox is counter-based).
"""
from __future__ import annotations

import numpy as np

PURPOSES = {
    "chain": 0,    # chain construction recipes (transition matrix, rewards)
    "problem": 1,  # operator construction (features, targets)
    "path": 2,     # observation path of a run
    "reward": 3,   # reward noise of a run
    "delay": 4,    # delay schedule of a run
    "select": 5,   # weighted output-iterate sampling
    "probe": 6,    # constants-audit probe points
    "grid": 7,     # mixing-time theta grid
}


def stream(base_seed: int, run_index: int = 0, purpose: str = "path") -> np.random.Generator:
    """Return the independent generator for ``(base_seed, run_index, purpose)``."""
    ss = np.random.SeedSequence(
        entropy=int(base_seed), spawn_key=(int(run_index), PURPOSES[purpose])
    )
    return np.random.Generator(np.random.Philox(ss))
