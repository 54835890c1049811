"""Deterministic, platform-independent pseudo-random generator.

Everything stochastic in this package (parameter init, data synthesis,
augmentation, batch shuffling) draws from `SplitMix64`, a counter-based
generator: output i is a fixed 64-bit mixing function applied to
``seed + (i+1) * GAMMA``.  Because each output depends only on the seed and
the counter, whole blocks can be produced with vectorized numpy uint64
arithmetic, and two runs with the same seed produce bit-identical streams
on any platform.

Gaussians come from the Box-Muller transform over the uniform stream, so
normal draws are exactly reproducible too (no ziggurat tables).
"""

from __future__ import annotations

import numpy as np

_U64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = float(2.0**-53)


def _mix_int(z: int) -> int:
    """SplitMix64 finalizer on a Python int (xor-shift-multiply chain)."""
    z &= _U64
    z = ((z ^ (z >> 30)) * _M1) & _U64
    z = ((z ^ (z >> 27)) * _M2) & _U64
    return (z ^ (z >> 31)) & _U64


def _mix_array(z: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer on a uint64 array."""
    m1 = np.uint64(_M1)
    m2 = np.uint64(_M2)
    z = (z ^ (z >> np.uint64(30))) * m1
    z = (z ^ (z >> np.uint64(27))) * m2
    return z ^ (z >> np.uint64(31))


def derive_seed(base_seed: int, *tags) -> int:
    """Derive an independent child seed from a base seed and int/str tags.

    Lets every sample / view / epoch own a private stream without any
    coordination between draw sites.
    """
    acc = int(base_seed) & _U64
    for tag in tags:
        if isinstance(tag, str):
            h = 0xCBF29CE484222325  # FNV-1a over utf-8 bytes
            for b in tag.encode("utf-8"):
                h = ((h ^ b) * 0x100000001B3) & _U64
            tag = h
        elif isinstance(tag, (int, np.integer)):
            tag = int(tag)
        else:
            raise TypeError(f"seed tags must be int or str, got {type(tag)!r}")
        # diffuse the accumulator before folding the tag so that the fold
        # is order-sensitive (mix(acc) ^ mix(tag) alone would commute)
        acc = _mix_int(_mix_int(acc + _GAMMA) ^ _mix_int(tag & _U64))
    return acc


class SplitMix64:
    """Counter-based uniform/normal generator with 64-bit (seed, counter) state."""

    def __init__(self, seed: int):
        self._seed = int(seed) & _U64
        self._counter = 0

    def derive(self, *tags) -> "SplitMix64":
        """Child generator; its stream is independent of this one's."""
        return SplitMix64(derive_seed(self._seed, *tags))

    @property
    def state(self) -> tuple[int, int]:
        return self._seed, self._counter

    @state.setter
    def state(self, value) -> None:
        seed, counter = value
        self._seed = int(seed) & _U64
        self._counter = int(counter)

    def next_u64(self) -> int:
        self._counter += 1
        return _mix_int((self._seed + self._counter * _GAMMA) & _U64)

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs as a uint64 array (vectorized)."""
        if n < 0:
            raise ValueError("n must be nonnegative")
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix_array(np.uint64(self._seed) + idx * np.uint64(_GAMMA))

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniform draws in [0, 1) with 53-bit resolution."""
        if shape is None:
            return (self.next_u64() >> 11) * _INV_2_53
        n = int(np.prod(shape)) if shape else 1
        vals = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return vals.reshape(shape)

    def uniform_range(self, lo: float, hi: float, shape=None):
        return lo + (hi - lo) * self.uniform(shape)

    def normal(self, shape=None, sigma: float = 1.0, mu: float = 0.0):
        """Gaussian draws via Box-Muller on consecutive uniform pairs."""
        scalar = shape is None
        shp = (1,) if scalar else shape
        n = int(np.prod(shp)) if shp else 1
        m = (n + 1) // 2
        u = self.uniform((2 * m,))
        # 1-u maps [0,1) to (0,1]; keeps log() finite.
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = (mu + sigma * z).reshape(shp)
        return float(out[0]) if scalar else out

    def below(self, n: int) -> int:
        """Integer in [0, n) (floor of uniform * n; bias negligible for n << 2^53)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        pool = np.arange(n)
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
