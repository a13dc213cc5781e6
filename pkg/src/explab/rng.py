"""Seed derivation for named random streams.

Every source of randomness flows from one root seed. Paired experiment arms
share exactly the streams they should (e.g. batching and mask streams) by
deriving per-purpose child seeds from stable names instead of consuming a
single global generator.
"""

import hashlib

import numpy as np


def derive_seed(root_seed: int, *names: str) -> int:
    """Derive a child seed from a root seed and a path of stream names.

    Stable across processes and platforms: uses SHA-256 of the textual path,
    not Python's salted hash().
    """
    path = ":".join([str(int(root_seed)), *names])
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1  # 63-bit non-negative


def stream(root_seed: int, *names: str) -> np.random.Generator:
    """A fresh generator for the named stream."""
    return np.random.default_rng(derive_seed(root_seed, *names))
