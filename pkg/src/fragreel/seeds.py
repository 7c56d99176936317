"""Named random streams derived from one root seed.

Every randomized stage (dataset split, background sampling, weight init,
epoch shuffling) draws from its own stream, so adding a new consumer never
perturbs the draws of an existing one.
"""

import hashlib

import numpy as np

__all__ = ["derive_seed", "stream"]


def derive_seed(root_seed: int, *names: str) -> int:
    """Derive a 64-bit child seed from a root seed and a stream name."""
    tag = ":".join([str(int(root_seed))] + [str(n) for n in names])
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, *names: str) -> np.random.Generator:
    """A generator seeded for the named purpose."""
    return np.random.default_rng(derive_seed(root_seed, *names))
