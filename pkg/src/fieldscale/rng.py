"""Counter-based SplitMix64 random numbers.

Output ``i`` (0-based) of a generator seeded with ``s`` is
``mix(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``, where ``mix`` is the
SplitMix64 finalizer. This is exactly the sequential SplitMix64 stream, but it
can be evaluated for any block of counters at once with numpy, which keeps the
synthetic worlds bit-identical across platforms and languages.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 1.0 / 9007199254740992.0


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, counters) -> np.ndarray:
    """Raw 64-bit outputs for the given 0-based counters of stream ``seed``."""
    c = np.asarray(counters, dtype=np.uint64)
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        state = s + (c + np.uint64(1)) * GOLDEN
    return mix64(state)


class SplitMix64:
    """Sequential view over the counter-based stream.

    Every draw consumes a fixed number of counters, so a sequence of calls is
    reproducible given the seed alone.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, np.arange(self.counter, self.counter + n, dtype=np.uint64))
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in [low, high) by scaling a 53-bit uniform (bias < 2**-40 for our ranges)."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(n)
        return low + np.floor(u * (high - low)).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller; consumes 2*n counters."""
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return r * np.cos(2.0 * np.pi * u2)


def normal_at(seed: int, counters) -> np.ndarray:
    """Standard normals addressed by counter, independent of draw order.

    Counter ``k`` uses raw outputs ``2k`` and ``2k + 1``.
    """
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        a = splitmix64(seed, c * np.uint64(2))
        b = splitmix64(seed, c * np.uint64(2) + np.uint64(1))
    u1 = (a >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
    u2 = (b >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
