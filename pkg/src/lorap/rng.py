"""Named random streams derived from a single root seed.

Every source of randomness in the package pulls from ``stream(seed, name)``
so that adding a new consumer never perturbs the draws seen by existing
ones.  Streams are independent PCG64 generators keyed by (seed, name).
"""

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a deterministic generator for the given root seed and stream name."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))
