"""Deterministic, implementation-portable pseudo-randomness.

Parameter init and dataset shuffles must reproduce bit-for-bit across runs
and platforms, so everything here is built on SplitMix64 (the published
constants) instead of a library generator whose stream may change.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash of a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def layer_seed(seed: int, layer_name: str) -> int:
    """Per-layer stream seed: mixes the model seed with the layer name."""
    return (fnv1a64(layer_name.encode("utf-8")) ^ (seed & _MASK)) & _MASK


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """SplitMix64 stream with vectorized block generation."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_uint64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def _block(self, n: int) -> np.ndarray:
        # state after k steps is state + k*GOLDEN, so a block is one ufunc chain
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            states = np.uint64(self._state) + steps * np.uint64(_GOLDEN)
            out = _mix(states)
        self._state = (self._state + n * _GOLDEN) & _MASK
        return out

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self._block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """n standard-normal doubles via Box-Muller."""
        pairs = (n + 1) // 2
        u1 = ((self._block(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (self._block(pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def randbelow(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; bias is irrelevant here,
        determinism is what matters."""
        return self.next_uint64() % n

    def shuffled(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx
