"""Deterministic random numbers built on the splitmix64 finalizer.

Every random decision in the toolkit (phantom geometry, weight init,
shuffling, dropout masks) flows through this module, keyed by explicit
64-bit seeds.  The generator is counter based: output ``i`` of the stream
keyed by ``k`` is ``mix64((k + (i+1)*GOLDEN) mod 2**64)`` where ``mix64``
is the splitmix64 mixing function (Steele, Lea & Flood's SplitMix).  A
counter-based scheme has no hidden state, vectorizes trivially, and
produces identical bytes on every platform, which keeps golden files and
cross-run comparisons stable.

Child seeds are derived with a distinct multiplier so that a derived key
never collides with an output of the parent stream.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_DERIVE = 0xD1B54A32D192ED03
_INV53 = 1.0 / (1 << 53)


def mix64(x: int) -> int:
    """splitmix64 mixing function on a 64-bit unsigned integer."""
    z = x & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive(key: int, *path: int) -> int:
    """Fold index path elements into ``key``, yielding an independent child key.

    ``derive(s, a, b)`` equals ``derive(derive(s, a), b)``, so nested
    components may keep splitting seeds without coordination.
    """
    k = key & _MASK
    for p in path:
        k = mix64((k ^ ((_DERIVE * ((p & _MASK) + 1)) & _MASK)) + GOLDEN)
    return k


class Stream:
    """Sequential view over the counter-based generator keyed by ``key``."""

    def __init__(self, key: int):
        self.key = key & _MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        return _mix64_array(z)

    def u64(self, n: int | None = None):
        if n is None:
            return int(self._raw(1)[0])
        return self._raw(n)

    def uniform(self, n: int | None = None, lo: float = 0.0, hi: float = 1.0):
        """Uniform floats in [lo, hi) with 53-bit resolution."""
        u = (self._raw(1 if n is None else n) >> np.uint64(11)).astype(np.float64)
        out = lo + u * _INV53 * (hi - lo)
        return float(out[0]) if n is None else out

    def integers(self, lo: int, hi: int, n: int | None = None):
        """Uniform integers in the inclusive range [lo, hi].

        Mapped through a double, so the (immeasurably small) modulo bias of
        direct reduction is avoided at the cost of ranges being limited to
        2**53 values; plenty for every caller here.
        """
        span = hi - lo + 1
        if span <= 0:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        u = self.uniform(1 if n is None else n)
        out = lo + np.floor(np.asarray(u) * span).astype(np.int64)
        out = np.minimum(out, hi)  # guards the u == 1.0-ulp edge
        return int(out[0]) if n is None else out

    def normal(self, n: int | None = None, mean: float = 0.0, std: float = 1.0):
        """Gaussian draws via Box-Muller on paired uniforms."""
        m = 1 if n is None else n
        half = (m + 1) // 2
        u1 = np.maximum(self.uniform(half), _INV53)
        u2 = self.uniform(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:m]
        out = mean + std * z
        return float(out[0]) if n is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, seq):
        return seq[self.integers(0, len(seq) - 1)]
