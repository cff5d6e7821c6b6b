"""Counter-style stream splitting.

Every random draw in the package comes from a generator keyed by
``(seed, *path)``.  Two streams with different paths are independent and a
stream never depends on how many other streams were created before it, so
results do not change with the number of workers.
"""
import numpy as np


def stream(seed, *path):
    """Return a Philox generator for the stream addressed by ``path``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


# fixed path prefixes, so unrelated consumers never collide
PRIOR = 1
TARGET = 2
BOOTSTRAP = 3
PERTURB = 4
ORACLE = 5
IMPORTANCE = 6
