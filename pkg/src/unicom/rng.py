"""Named random streams derived from a single master seed.

Every consumer of randomness (initialization, shuffling, class sampling,
feature masks, ...) draws from its own stream identified by a purpose name
and an optional step counter. Streams are mutually independent, so adding
or removing one consumer never perturbs the draws seen by another.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_rng(seed: int, name: str, step: int = 0) -> np.random.Generator:
    """Return a fresh Generator for stream `name` at `step`.

    Identical (seed, name, step) triples always produce identical draws,
    independent of platform and of any other stream.
    """
    entropy = [int(seed) & _MASK64, _name_key(name), int(step) & _MASK64]
    return np.random.default_rng(np.random.SeedSequence(entropy))
