"""Pinned pseudo-random number generator.

xoshiro256** seeded through splitmix64. Every random draw in the toolkit
(weight init, patch crops, noise fields) goes through this module so a
given seed reproduces the same stream on any platform. The exact recipe
is written up in docs/prng.md.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1
_TWO_POW_M53 = 1.0 / 9007199254740992.0


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3


class Rng:
    """xoshiro256** stream.

    The four state words are produced by four consecutive splitmix64
    outputs starting from ``seed`` (reduced mod 2**64).
    """

    def __init__(self, seed: int):
        sm = int(seed) & _MASK
        words = []
        for _ in range(4):
            sm, z = splitmix64(sm)
            words.append(z)
        self.seed = int(seed)
        self._s = np.array(words, dtype=np.uint64)

    def state(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._s)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits of each output."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def randint(self, high: int) -> int:
        """Integer in [0, high) as floor(u * high)."""
        if high <= 0:
            raise ValueError("high must be positive")
        return min(int(self.uniform(1)[0] * high), high - 1)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller, two per pair of uniforms.

        For each pair (u1, u2): r = sqrt(-2 ln(1 - u1)), theta = 2 pi u2,
        emitting r cos(theta) then r sin(theta). An odd ``n`` drops the
        final sine.
        """
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2), dtype=np.float64)
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]
