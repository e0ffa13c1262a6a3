"""Counter-based SplitMix64 random streams.

Every random decision in the toolkit (patch origins, bagging, feature
subsets, overlap sampling, within-phase shuffles, phantom noise) is drawn
from a :class:`Stream`. A stream is fully described by a 64-bit ``key`` and
a draw ``counter``; draw ``i`` is::

    mix64(key + (i + 1) * 0x9E3779B97F4A7C15)  (mod 2**64)

where ``mix64`` is the SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

This is exactly the output sequence of a SplitMix64 generator seeded with
``key``. Derived quantities:

* ``randbelow(n)``: draw ``r``; reject while ``r >= 2**64 - (2**64 % n)``;
  return ``r % n``.
* ``random()``: ``(r >> 11) * 2**-53``, uniform on [0, 1).
* ``shuffle``: Fisher-Yates from the last position down, ``j = randbelow(i + 1)``.
* ``sample(seq, k)``: the first ``k`` positions of a forward partial
  Fisher-Yates, ``j = i + randbelow(n - i)``.

Sub-streams are derived with :func:`derive`, which folds labels into the key
(integers directly, strings through an 8-byte BLAKE2b digest), so that
e.g. the stream for tree 17 of a forest does not depend on how many draws
tree 16 consumed.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from typing import TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

T = TypeVar("T")


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _label_value(label: int | str) -> int:
    if isinstance(label, str):
        return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")
    return int(label) & MASK64


def derive(seed: int, *labels: int | str) -> int:
    """Fold ``labels`` into ``seed`` to obtain an independent stream key."""
    key = int(seed) & MASK64
    for label in labels:
        key = mix64(key ^ mix64(_label_value(label) + GAMMA))
    return key


class Stream:
    """A SplitMix64 stream positioned at ``counter`` draws from ``key``."""

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & MASK64
        self.counter = int(counter)

    @classmethod
    def from_seed(cls, seed: int, *labels: int | str) -> Stream:
        return cls(derive(seed, *labels))

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.key + self.counter * GAMMA)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: Sequence[T], k: int) -> list[T]:
        pool = list(items)
        n = len(pool)
        if k > n:
            raise ValueError(f"cannot sample {k} items from {n}")
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` raw draws as a uint64 array (vectorized, same values as ``next_u64``)."""
        counters = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + counters * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    def random_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal_array(self, n: int) -> np.ndarray:
        """Standard normal draws by Box-Muller (cosine branch), two uniforms per value."""
        u = self.random_array(2 * n)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
