"""Seeded, splittable randomness.

Every source of randomness in the project flows through :class:`Rng`.  A
stream is identified by a 64-bit seed plus a textual label; the pair is
hashed into a Philox key, so identical (seed, label) pairs replay exactly
and distinct labels give statistically independent streams.  There is no
global random state anywhere.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """SplitMix64 finalizer. Bijective on 64-bit ints."""
    x &= _MASK64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & _MASK64
    return x ^ (x >> 31)


class Rng:
    """A named counter-based random stream.

    Value-like: construct (or ``child``) before handing to another worker;
    a single instance is consumed sequentially.
    """

    def __init__(self, seed: int, label: str = "root"):
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned int, got {seed}")
        self.seed = seed
        self.label = label
        digest = hashlib.sha256(f"{seed:016x}|{label}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "Rng":
        """Derive an independent stream; does not advance this one."""
        return Rng(self.seed, f"{self.label}/{label}")

    # -- draws ----------------------------------------------------------

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64).astype(dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform ints in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, label={self.label!r})"
