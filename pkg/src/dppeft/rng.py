"""Seeded, splittable random streams.

Streams are numpy Philox generators keyed through :class:`numpy.random.SeedSequence`,
so a ``(seed, path)`` pair identifies a stream independently of how many other
streams were drawn from before it.
"""

from __future__ import annotations

import zlib

import numpy as np

from .autodiff import get_default_dtype


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


class Rng:
    """A counter-based random stream identified by a seed and a split path."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *parts) -> Rng:
        """Independent sub-stream; ``parts`` may be ints or strings."""
        return Rng(self.seed, self.path + tuple(_key(p) for p in parts))

    def split(self, n: int) -> list[Rng]:
        return [self.child(i) for i in range(n)]

    def normal(self, shape, std: float = 1.0, dtype=None) -> np.ndarray:
        dtype = dtype or get_default_dtype()
        draws = self._gen.standard_normal(size=shape, dtype=np.float64)
        return (draws * std).astype(dtype)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def gaussian_init(shape, sigma: float, rng: Rng, dtype=None) -> np.ndarray:
    """Zero-centred i.i.d. normal entries with standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    dtype = dtype or get_default_dtype()
    if sigma == 0:
        return np.zeros(shape, dtype=dtype)
    return rng.normal(shape, sigma, dtype=dtype)
