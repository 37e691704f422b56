"""SplitMix64 stream and the Fisher-Yates shuffle driven by it.

The generator is fixed (rather than numpy's default) so that scramble
permutations are reproducible bit-for-bit from a 64-bit seed alone.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of SplitMix64 seeded with ``seed`` (uint64 array).

    Output k is mix(seed + (k + 1) * gamma), so the whole stream is computed
    in one vectorized pass; uint64 arithmetic wraps modulo 2**64.
    """
    seed = int(seed) & MASK64
    k = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed) + k * np.uint64(GOLDEN_GAMMA)
        return _mix(state)


class SplitMix64:
    """Scalar SplitMix64, kept for clarity and for cross-checking the vector form."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def bounded(r: int, n: int) -> int:
    """Map a 64-bit draw to [0, n) using its top 53 bits (multiply-shift)."""
    return ((r >> 11) * n) >> 53


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) driven by SplitMix64(seed).

    For i = n-1 down to 1, swap a[i] with a[j], j drawn uniformly in [0, i].
    Draws are consumed in that order, one per step.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    perm = list(range(n))
    if n < 2:
        return np.asarray(perm, dtype=np.int64)
    draws = splitmix64(seed, n - 1).tolist()
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = bounded(draws[step], i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def stable_hash(text: str) -> int:
    """64-bit FNV-1a of the UTF-8 bytes; stable across processes and platforms."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h
