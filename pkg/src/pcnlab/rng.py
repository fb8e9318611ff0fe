"""Deterministic random streams.

Every stochastic element of a run (weight init, shuffling, Langevin noise,
synthetic data) draws from an RngStream so that identical configs replay
bit-identically. Streams are counter-based (numpy Philox) and therefore
platform-stable; Gaussian draws use numpy's ziggurat sampler, which is
deterministic given the stream state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_seed(seed: int, tags: tuple) -> int:
    """Hash (seed, tags) into a new 64-bit seed for a child stream."""
    h = hashlib.sha256(repr((int(seed), tags)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class RngStream:
    """A named, reproducible random stream.

    `seed` and `calls` (the draw counter) identify the stream position;
    the same (seed, sequence of calls) always yields the same values.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.calls = 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *tags) -> "RngStream":
        """Derive an independent stream keyed by (seed, tags)."""
        return RngStream(_derive_seed(self.seed, tags))

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        self.calls += 1
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low: float, high: float, shape=(), dtype=np.float32) -> np.ndarray:
        self.calls += 1
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        self.calls += 1
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        self.calls += 1
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, calls={self.calls})"
