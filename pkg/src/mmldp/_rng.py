"""Counter-based random stream construction.

Every stochastic routine derives its generator from a (seed, *key) tuple via
Philox, so a trajectory is fully determined by the seed and its stream key and
batches can be produced in any order or across any number of workers without
changing results.
"""

import numpy as np


def make_rng(seed, *key):
    """Return a Generator for the stream identified by (seed, key...)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
