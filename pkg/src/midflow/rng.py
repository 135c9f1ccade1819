"""Seedable counter-based random number generation.

All stochastic behaviour in the library (noise draws, augmentation choices,
dataset generation) goes through :class:`Rng`, which wraps numpy's Philox
counter-based bit generator. Normal variates are produced with the
Box-Muller transform on Philox uniforms, so a given (seed, stream) pair
yields identical draws on every platform.
"""

from __future__ import annotations

import numpy as np

_TWO_PI = np.float64(2.0 * np.pi)


class Rng:
    """Deterministic random stream keyed by a 64-bit seed and stream index."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream; (seed, stream) fully determines its output."""
        return Rng(self.seed, stream)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = self._gen.random(shape, dtype=np.float64)
        return (low + (high - low) * u).astype(np.float32)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal via Box-Muller on Philox uniforms."""
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        # 1 - u keeps the argument of log strictly positive
        u1 = 1.0 - self._gen.random(half, dtype=np.float64)
        u2 = self._gen.random(half, dtype=np.float64)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])[:n]
        out = z.astype(np.float32)
        return out.reshape(shape) if shape else out[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, p: float) -> bool:
        """Bernoulli draw with probability ``p`` of True."""
        return bool(self._gen.random() < p)


def mix_seed(run_seed: int, sample_index: int) -> int:
    """Per-sample noise seed so step-count sweeps are paired comparisons."""
    x = (run_seed * 0x9E3779B97F4A7C15 + sample_index * 0xBF58476D1CE4E5B9 + 1) \
        & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return int(x >> 1)
