"""Portable pseudo-random numbers.

Every random draw in the package (synthetic data, parameter init, shuffling,
dropout) goes through :class:`SplitMix64` so results do not depend on the numpy
version. SplitMix64 is counter based: output ``n`` is ``mix(seed + n * GAMMA)``,
which vectorizes directly over uint64 arrays.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MUL1
        z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed for stream ``index`` (used for repeats and sub-streams)."""
    z = np.array([(seed ^ ((index + 1) * 0xD1B54A32D192ED03)) & _MASK64], dtype=np.uint64)
    return int(_mix(z)[0])


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + steps * np.uint64(GAMMA)
        return _mix(z)

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller (cosine branch only)."""
        n = int(np.prod(shape, dtype=np.int64))
        u1 = self.uniform((n,))
        u2 = self.uniform((n,))
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return (r * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices out of ``range(n)``, sorted."""
        return np.sort(self.permutation(n)[:k])
