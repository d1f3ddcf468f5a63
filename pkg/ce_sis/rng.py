"""Counter-based random stream derivation.

Every random draw in a run comes from a Generator derived from the master
seed and a tuple of integer keys, so numbers do not depend on the order in
which repetitions, iterations or inputs are processed.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Purpose tag mixed into every derived seed"""

    SAMPLE = 0
    SIMULATE = 1
    SELECT = 2
    CMC = 3
    OPTIMAL = 4


def derive_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Return a Generator seeded from ``[master_seed, *keys]``"""
    entropy = [int(master_seed)] + [int(key) for key in keys]
    if any(value < 0 for value in entropy):
        raise ValueError("Seeds and stream keys must be non-negative integers")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def repetition_rng(master_seed: int, repetition: int, iteration: int, stream: Stream, index: int = 0) -> np.random.Generator:
    """Stream for one (repetition, iteration, purpose, index) cell"""
    return derive_rng(master_seed, repetition, iteration, int(stream), index)
