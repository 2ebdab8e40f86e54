"""Deterministic pseudo-random streams for reproducible generation and training.

The generator is xoshiro256** seeded through splitmix64, implemented in plain
integer arithmetic.  Neither ``random`` nor ``numpy.random`` is used for
anything that lands in an artifact: their streams are only stable per release,
and regenerating a benchmark or checkpoint must be byte-identical years later.

Child streams are derived by absorbing a sequence of tags (ints or strings)
into the parent seed, so independent concerns (noise, splits, init, proxies)
never share or race a stream.  String tags are hashed with FNV-1a 64.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** stream with unbiased integer draws and polar normals."""

    __slots__ = ("_seed", "_s0", "_s1", "_s2", "_s3")

    def __init__(self, seed: int):
        if not isinstance(seed, int):
            raise TypeError(f"seed must be int, got {type(seed).__name__}")
        self._seed = seed & _MASK
        state = self._seed
        state, self._s0 = _splitmix64(state)
        state, self._s1 = _splitmix64(state)
        state, self._s2 = _splitmix64(state)
        state, self._s3 = _splitmix64(state)
        # xoshiro must not start at the all-zero state
        if self._s0 == self._s1 == self._s2 == self._s3 == 0:
            self._s0 = 1

    @property
    def seed(self) -> int:
        return self._seed

    def child(self, *tags: int | str) -> "Rng":
        """Derive an independent stream keyed by the parent seed and tags."""
        if not tags:
            raise ValueError("child() requires at least one tag")
        state = self._seed
        for tag in tags:
            if isinstance(tag, str):
                value = _fnv1a(tag)
            elif isinstance(tag, int):
                value = tag & _MASK
            else:
                raise TypeError(f"tag must be int or str, got {type(tag).__name__}")
            state, out = _splitmix64(state ^ value)
            state = out
        return Rng(state)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        """Uniform float64 in [0, 1) with 53 significant bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Uniform int in [0, n), unbiased via rejection."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        # largest multiple of n that fits in 64 bits
        threshold = ((1 << 64) - ((1 << 64) % n)) & _MASK
        if threshold == 0:
            threshold = 1 << 64
        while True:
            x = self.next_u64()
            if x < threshold:
                return x % n

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Marsaglia polar method; the second deviate is discarded to keep
        the stream position independent of call pairing."""
        if sigma < 0.0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        while True:
            u = 2.0 * self.random() - 1.0
            v = 2.0 * self.random() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                return mu + sigma * u * math.sqrt(-2.0 * math.log(s) / s)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, population: list, k: int) -> list:
        """k distinct elements, uniform over subsets, in draw order."""
        n = len(population)
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} from population of {n}")
        # partial Fisher-Yates over virtual indices
        swapped: dict[int, int] = {}
        out = []
        for i in range(k):
            j = i + self.randint(n - i)
            out.append(population[swapped.get(j, j)])
            swapped[j] = swapped.get(i, i)
        return out
