"""
Deterministic random streams.

Every stochastic step draws from its own numpy Generator derived from the
run seed plus a tuple of integer tags (tree index, fold index, purpose), so
the order in which workers run never changes a drawn number.
"""

from typing import Union

import numpy as np

# Purpose tags keep streams for different consumers apart under one seed.
FOLDS = 1
NETWORK_INIT = 2
MINIBATCH_ORDER = 3
DROPOUT = 4
FOREST = 5
CELL = 6

_MASK64 = (1 << 64) - 1

Tag = Union[int, np.integer]


def seed_sequence(seed: int, *tags: Tag) -> np.random.SeedSequence:
    # SeedSequence wants non-negative entropy; fold negative seeds into 64 bits
    entropy = [int(seed) & _MASK64] + [int(t) & _MASK64 for t in tags]
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *tags: Tag) -> np.random.Generator:
    """Independent Generator for (seed, *tags)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *tags)))


def derive_seed(seed: int, *tags: Tag) -> int:
    """A 63-bit integer seed for (seed, *tags), for handing to sub-configs."""
    return int(seed_sequence(seed, *tags).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
