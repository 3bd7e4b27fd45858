"""Axis-aligned boxes used for state spaces, safe sets, and noise supports."""

from __future__ import annotations

import numpy as np

__all__ = ["Box"]


class Box:
    """Closed axis-aligned box given by lower and upper corner vectors."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        if self.lower.ndim != 1 or self.lower.shape != self.upper.shape:
            raise ValueError("box corners must be 1-d vectors of equal length")
        if not (np.isfinite(self.lower).all() and np.isfinite(self.upper).all()):
            raise ValueError("box corners must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("box has lower > upper on some axis")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Membership of one point ``(dim,)`` or a batch ``(n, dim)``."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = np.all((p >= self.lower) & (p <= self.upper), axis=1)
        return inside if np.asarray(points).ndim > 1 else bool(inside[0])

    def contains_box(self, other: "Box") -> bool:
        return bool(
            np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper)
        )

    def strictly_contains_box(self, other: "Box") -> bool:
        return bool(
            np.all(other.lower > self.lower) and np.all(other.upper < self.upper)
        )

    def clip(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = (n, self.dim) if n is not None else self.dim
        return rng.uniform(self.lower, self.upper, size=size)

    def shrink(self, margin: float) -> "Box":
        """Box moved inward by ``margin`` on every face (may collapse)."""
        lo = self.lower + margin
        hi = self.upper - margin
        return Box(np.minimum(lo, self.center), np.maximum(hi, self.center))

    def __repr__(self) -> str:
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Box)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )
