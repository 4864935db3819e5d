"""Deterministic pseudo-random numbers for reproducible experiments.

Every stochastic choice in this package (weight init, epoch shuffles, blob
sampling, label noise) flows through the generator defined here rather than
a global RNG, so a run is a pure function of its recorded seeds and the
same bits come out on any platform.

Algorithm: xorshift64* (Marsaglia xorshift with an output multiply).
State is a single nonzero 64-bit word; one step is

    x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27;
    output = (x * 2685821657736338717) mod 2**64

Seeds are conditioned through the SplitMix64 finalizer before use so that
small or correlated integer seeds (0, 1, 2, ...) land in unrelated states.
Stream derivation for sub-tasks (layer init, per-epoch shuffles) hashes the
base seed together with integer salts via the same finalizer.

Floats in [0, 1) take the top 53 bits of one output word. Gaussians use the
Box-Muller transform. Bounded ints use rejection sampling, so they are
exactly uniform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_STAR = 2685821657736338717  # 0x2545F4914F6CDD1D


def _mix64(x: int) -> int:
    """SplitMix64 finalizer: a bijective avalanche on 64-bit words."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(base: int, *salts: int) -> int:
    """Mix a base seed with integer salts into one well-spread 64-bit seed.

    Used to give each sub-task (a layer, an epoch) its own stream while
    keeping the whole experiment a function of a single recorded seed.
    """
    h = _mix64((base & _MASK64) + _GOLDEN)
    for salt in salts:
        h = _mix64(h ^ _mix64((salt & _MASK64) + _GOLDEN))
    return h


class Xorshift64Star:
    """xorshift64* stream, seeded through SplitMix64 (never state 0)."""

    def __init__(self, seed: int):
        state = _mix64((seed & _MASK64) + _GOLDEN)
        if state == 0:
            # xorshift's one forbidden state; the finalizer is a bijection
            # so only a single seed maps here.
            state = _GOLDEN
        self._state = state
        self._spare_gauss: float | None = None

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self._state = x
        return (x * _STAR) & _MASK64

    def next_float(self) -> float:
        """Uniform draw in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, lo: float, hi: float, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        span = hi - lo
        for i in range(n):
            out[i] = lo + span * self.next_float()
        return out

    def normals(self, n: int) -> np.ndarray:
        """Standard normal draws via Box-Muller, consuming pairs of uniforms."""
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            if self._spare_gauss is not None:
                out[i] = self._spare_gauss
                self._spare_gauss = None
                continue
            # u1 in (0, 1] keeps the log finite
            u1 = ((self.next_u64() >> 11) + 1) * (2.0 ** -53)
            u2 = self.next_float()
            r = np.sqrt(-2.0 * np.log(u1))
            theta = 2.0 * np.pi * u2
            out[i] = r * np.cos(theta)
            self._spare_gauss = float(r * np.sin(theta))
        return out

    def randint_below(self, n: int) -> int:
        """Uniform int in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint_below needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)
