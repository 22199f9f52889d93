"""Seeded xoshiro256** generator.

Streams are identical on every platform for a given 64-bit seed: the state
is expanded with splitmix64 and every draw is derived from the raw 64-bit
outputs with fixed arithmetic. Bulk draws go through a numba kernel.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_MASK = (1 << 64) - 1
_JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (next_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << numba.uint64(k)) | (x >> numba.uint64(64 - k))


@numba.njit(cache=True)
def _fill(s, out):
    s0, s1, s2, s3 = s[0], s[1], s[2], s[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * numba.uint64(5), 7) * numba.uint64(9)
        t = s1 << numba.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    s[0], s[1], s[2], s[3] = s0, s1, s2, s3


class Xoshiro256:
    """xoshiro256** with a small numpy-flavoured sampling API."""

    def __init__(self, seed: int = 0):
        x = int(seed) & _MASK
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    # raw stream ---------------------------------------------------------
    def next_u64(self, n: int | None = None) -> np.ndarray | int:
        if n is None:
            out = np.empty(1, dtype=np.uint64)
            _fill(self.state, out)
            return int(out[0])
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill(self.state, out)
        return out

    def clone(self) -> "Xoshiro256":
        other = Xoshiro256.__new__(Xoshiro256)
        other.state = self.state.copy()
        return other

    def getstate(self) -> str:
        return ",".join(f"{int(w):016x}" for w in self.state)

    def setstate(self, text: str) -> None:
        words = [int(w, 16) for w in text.split(",")]
        if len(words) != 4:
            raise ValueError("xoshiro state needs four words")
        self.state = np.array(words, dtype=np.uint64)

    def jump(self) -> None:
        """Advance 2**128 draws; used to derive non-overlapping substreams."""
        acc = [0, 0, 0, 0]
        for word in _JUMP:
            for b in range(64):
                if (word >> b) & 1:
                    acc = [a ^ int(s) for a, s in zip(acc, self.state)]
                self.next_u64(1)
        self.state = np.array(acc, dtype=np.uint64)

    def spawn(self) -> "Xoshiro256":
        """Return an independent generator and advance this one past it."""
        child = self.clone()
        self.jump()
        return child

    # derived draws ------------------------------------------------------
    def random(self, shape=None) -> np.ndarray | float:
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        n = 1 if shape is None else int(np.prod(shape))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        if shape is None:
            return float(u[0])
        return u.reshape(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return low + (high - low) * self.random(shape)

    def integers(self, n: int, shape=None):
        """Integers in [0, n) by multiply-shift on 32 high bits (bias < n/2**32)."""
        if n <= 0:
            raise ValueError("n must be positive")
        count = 1 if shape is None else int(np.prod(shape))
        hi = self.next_u64(count) >> np.uint64(32)
        vals = ((hi * np.uint64(n)) >> np.uint64(32)).astype(np.int64)
        if shape is None:
            return int(vals[0])
        return vals.reshape(shape)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return self.random(shape) < p

    def normal(self, shape=None):
        """Standard normals via Box-Muller."""
        count = 1 if shape is None else int(np.prod(shape))
        half = (count + 1) // 2
        u1 = 1.0 - self.random(half)
        u2 = self.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])[:count]
        if shape is None:
            return float(z[0])
        return z.reshape(shape)

    def choice(self, seq):
        return seq[self.integers(len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
