"""Seed derivation.

Every derived seed is splitmix64 applied to the parent seed xor a stable
64-bit hash of a label, chained label by label.  A cell's seed therefore
depends only on its own labels, so adding cells or seeds never shifts the
seeds of existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _label_hash(label) -> int:
    digest = hashlib.blake2b(repr(label).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *labels) -> int:
    """64-bit child seed of ``seed`` for the given label path."""
    x = int(seed) & MASK64
    for label in labels:
        x = splitmix64(x ^ _label_hash(label))
    return x


def rng_for(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
