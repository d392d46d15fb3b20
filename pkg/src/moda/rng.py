"""Counter-based random streams with order-independent child keys."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic random source backed by numpy's Philox generator.

    A stream is identified by (seed, path). Child streams are derived by
    hashing the key path, not by drawing from the parent, so the values a
    child produces never depend on how much the parent (or any sibling)
    has been used. That keeps parameter initialisation stable across
    refactors that reorder module construction.
    """

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed) & _MASK64
        self.path = path
        digest = hashlib.blake2b(
            f"{self.seed}:{self.path}".encode(), digest_size=16
        ).digest()
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(digest, "little"))
        )

    def child(self, name: object) -> "Rng":
        sub = f"{self.path}/{name}" if self.path else str(name)
        return Rng(self.seed, sub)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray | int:
        out = self._gen.integers(low, high, size=shape)
        return int(out) if shape is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
