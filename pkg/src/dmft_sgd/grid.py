"""Uniform time grid shared by all kernels, paths, and simulators."""

from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError


@dataclass(frozen=True)
class TimeGrid:
    """Discretization of [0, T] into N steps of size delta.

    ``times`` holds the N+1 grid times 0, delta, ..., N*delta, so the horizon
    itself is on the grid and every kernel is an (N+1) x (N+1) block array.
    """

    T: float
    delta: float
    N: int = field(init=False)

    def __post_init__(self):
        if not (self.T > 0 and self.delta > 0):
            raise StructuralError("TimeGrid requires T > 0 and delta > 0")
        n = int(round(self.T / self.delta))
        if n < 1:
            raise StructuralError("TimeGrid requires at least one step")
        if abs(n * self.delta - self.T) > 1e-12 * max(1.0, abs(self.T)):
            raise StructuralError(
                f"horizon T={self.T} is not an integer multiple of delta={self.delta}"
            )
        object.__setattr__(self, "N", n)

    @property
    def n_points(self) -> int:
        return self.N + 1

    @property
    def times(self) -> np.ndarray:
        return self.delta * np.arange(self.N + 1)

    def index_of(self, t: float) -> int:
        """Nearest grid index for time t (must lie on the grid up to 1e-9)."""
        i = int(round(t / self.delta))
        if not (0 <= i <= self.N) or abs(i * self.delta - t) > 1e-9:
            raise StructuralError(f"time {t} is not on the grid")
        return i

    def same_as(self, other: "TimeGrid") -> bool:
        return self.N == other.N and abs(self.delta - other.delta) < 1e-15
