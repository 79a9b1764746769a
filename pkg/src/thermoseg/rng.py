"""Deterministic, platform-independent random streams.

All randomness in the project flows through this module so that datasets,
parameter initializations and training runs are bit-reproducible across
platforms.  The generator is a counter-based splitmix64: each output is the
splitmix64 finalizer applied to ``seed + i * GOLDEN`` for an increasing
counter ``i``, which vectorizes cleanly and needs no mutable numpy state.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 finalizer on a single 64-bit integer."""
    z &= _MASK
    z ^= z >> 30
    z = (z * _MIX1) & _MASK
    z ^= z >> 27
    z = (z * _MIX2) & _MASK
    z ^= z >> 31
    return z


def derive_seed(master: int, *tags) -> int:
    """Derive a child seed from a master seed and a path of tags.

    Tags may be ints or strings; strings are folded in bytewise.  The same
    (master, tags) always yields the same child seed.
    """
    state = mix64(master ^ _GOLDEN)
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode("utf-8"):
                state = mix64(state ^ b)
        else:
            state = mix64(state ^ (int(tag) & _MASK))
    return state


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based splitmix64 stream with uniform/normal/shuffle helpers."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & _MASK)
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 outputs."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix_array(self._seed + idx * np.uint64(_GOLDEN))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform float64 draws in [low, high)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, mean: float = 0.0, sigma: float = 1.0):
        """Gaussian draws via Box-Muller on paired uniforms."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        z = self.raw(2 * m)
        # shift into (0, 1] so log never sees zero
        u1 = ((z[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (z[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        g = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        g = mean + sigma * g
        return float(g[0]) if size is None else g.reshape(size)

    def integer(self, bound: int) -> int:
        """One integer in [0, bound). Modulo bias is negligible for desk-scale bounds."""
        return int(self.raw(1)[0] % np.uint64(bound))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        draws = self.raw(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
