"""Counter-based random streams keyed by (master seed, tag, path, purpose).

Every path of every ensemble owns private Philox streams, so a path's draws
depend only on its key and on how many values it has consumed (the Philox
counter), never on how paths are chunked or scheduled across workers.
"""

import numpy as np

NOISE = 0
CHAIN = 1
PARTNER_CHAIN = 2
SUBSAMPLE = 3
SAMPLING = 4

MAX_SEED = 2**64 - 1


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed, path=0, purpose=NOISE, tag=0):
    """Return the generator for one (seed, tag, path, purpose) key."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=(int(tag), int(path), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))
