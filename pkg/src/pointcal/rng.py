"""Seeded pseudorandom generation with derivable child streams.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's counter-based Philox (4x64, 10 rounds) bit generator. The
Philox algorithm is fully specified in the Random123 suite, so a given
seed produces the same stream on every platform. Child streams are derived
by mixing the parent seed with integer or string keys through splitmix64,
which lets independent tasks (scenes, pairs, oracle triplets) consume
non-overlapping streams deterministically.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    if isinstance(key, str):
        digest = hashlib.blake2s(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng keys must be int or str, got {type(key).__name__}")


def derive_seed(seed: int, *keys) -> int:
    """Mix a parent seed with keys into a new 64-bit seed (splitmix64)."""
    h = int(seed) & _MASK64
    for key in keys:
        h = _splitmix64(h ^ _key_to_int(key))
    return h


class Rng:
    """Deterministic random stream, seeded with a 64-bit integer."""

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)):
            raise TypeError("seed must be an integer")
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, *keys) -> "Rng":
        """Child stream keyed on ints/strings; independent of the parent."""
        return Rng(derive_seed(self.seed, *keys))

    def normal(self, shape=None, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape if shape is not None else (),
                                         dtype=dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, high: int, size=None) -> np.ndarray:
        """Uniform integers in [0, high)."""
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
