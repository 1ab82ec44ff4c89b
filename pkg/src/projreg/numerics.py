"""Seeded randomness and small numeric helpers shared by every module.

All arithmetic is double precision. The random number generator is
numpy's PCG64 keyed through ``SeedSequence``, which gives reproducible
streams and cheap independent sub-streams: a sub-stream is keyed by
``(seed, *path)`` so results never depend on scheduling order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Rng", "as_vector", "as_matrix", "require_finite", "stable_softmax"]

_MAX_SEED = 2**64 - 1


class Rng:
    """Deterministic random stream keyed by a 64-bit seed and a stream path.

    Identical ``(seed, path)`` always reproduces the identical stream.
    ``substream(i)`` derives an independent generator keyed by
    ``(seed, *path, i)``; sub-streams of distinct ids never coincide, so
    per-experiment streams can be consumed in any order (or in parallel)
    without changing results.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not (0 <= int(seed) <= _MAX_SEED):
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, *self.path)))
        )

    def substream(self, stream_id: int) -> "Rng":
        return Rng(self.seed, self.path + (int(stream_id),))

    def uniform(self, size=None):
        """Draw from U[0, 1); scalar float when size is None."""
        out = self._gen.random(size)
        return float(out) if size is None else out

    def normal(self, size=None, scale: float = 1.0):
        out = self._gen.normal(0.0, scale, size)
        return float(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def subset(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n)."""
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def as_vector(values) -> np.ndarray:
    """Coerce to a 1-D float64 array without copying when already one."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {arr.shape[1]}")
    return arr


def require_finite(arr: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def stable_softmax(scores) -> np.ndarray:
    """Softmax with unconditional max-subtraction.

    Safe for any finite score magnitude (scores may grow with the weights
    during training). Output entries are positive and sum to 1 up to
    floating-point rounding.
    """
    s = as_vector(scores)
    if s.size == 0:
        raise ValueError("empty vector")
    require_finite(s, "softmax scores")
    e = np.exp(s - s.max())
    return e / e.sum()
