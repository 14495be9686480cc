"""Stable seed derivation.

Every random draw in the package is keyed by a tuple such as
``(master_seed, "sample", round)``; hashing the tuple keeps runs reproducible
without any global RNG state.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*parts: object) -> int:
    """Hash ``parts`` into a 64-bit seed. Order and type of parts matter."""
    text = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(*parts: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


class SplitMix64:
    """Tiny 64-bit generator used for mini-batch shuffling.

    Kept in pure Python so batch order does not depend on numpy's bit
    generator implementation.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        # rejection sampling avoids modulo bias
        limit = _MASK64 - (_MASK64 % bound)
        while True:
            r = self.next()
            if r < limit:
                return r % bound


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` driven by SplitMix64."""
    gen = SplitMix64(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = gen.below(i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return np.asarray(idx, dtype=np.int64)
