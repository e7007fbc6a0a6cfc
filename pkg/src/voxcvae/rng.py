"""Splittable, counter-tracked random streams.

Every stochastic component (initialization, dropout, latent noise, shuffling,
shape sampling) draws from its own :class:`Rng` so that runs replay exactly.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """A deterministic random stream identified by ``(seed, stream_id)``.

    Streams are backed by numpy's Philox bit generator keyed through a
    ``SeedSequence`` with the stream path as spawn key, so distinct stream ids
    give statistically independent sequences.
    """

    def __init__(self, seed: int, stream_id: int = 0, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._path = _path + (self.stream_id,)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(seq))
        self.counter = 0

    def spawn(self, stream_id: int) -> "Rng":
        """Child stream nested under this one."""
        return Rng(self.seed, stream_id, _path=self._path)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path}, counter={self.counter})"

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        self.counter += 1
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0, dtype=np.float64):
        self.counter += 1
        if shape is None:
            return float(self._gen.uniform(low, high))
        out = self._gen.random(shape, dtype=np.float64 if dtype == np.float64 else np.float32)
        if low != 0.0 or high != 1.0:
            out = low + (high - low) * out
        return out.astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None, dtype=np.int64):
        self.counter += 1
        return self._gen.integers(low, high, size=size, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)
