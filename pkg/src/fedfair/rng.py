"""Deterministic RNG substream derivation.

Every random decision in a run is drawn from a stream addressed by
(seed, domain, *path). Streams are independent of each other and of the
order in which they are created, which is what makes results identical
for any worker count.
"""

import numpy as np

# Domain codes. Never renumber: stream identities are part of the
# reproducibility contract for a given seed.
DATA = 1
PARTITION = 2
SPLIT = 3
INIT = 4
TARGETS = 5
SHUFFLE = 6
PENALTY = 7
CURVATURE = 8
TIEBREAK = 9


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream addressed by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))
