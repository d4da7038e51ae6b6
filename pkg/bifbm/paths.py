from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from bifbm.errors import GridError

UNIFORM_RTOL = 1e-9


@dataclass(frozen=True, slots=True, eq=False)
class Grid:
    points: NDArray[np.float64]
    includes_origin: bool

    @classmethod
    def from_points(cls, points: ArrayLike) -> "Grid":
        arr = np.array(points, dtype=np.float64).ravel()
        if arr.size == 0:
            raise GridError("grid must be nonempty")
        if not np.all(np.isfinite(arr)):
            raise GridError("grid points must be finite")
        if arr[0] < 0.0:
            raise GridError(f"grid points must be >= 0, got {arr[0]}")
        if arr.size > 1 and not np.all(np.diff(arr) > 0.0):
            raise GridError("grid points must be strictly increasing")
        arr.setflags(write=False)
        return cls(points=arr, includes_origin=bool(arr[0] == 0.0))

    @classmethod
    def uniform(cls, horizon: float, steps: int, include_origin: bool = True) -> "Grid":
        if steps < 1:
            raise GridError(f"uniform grid needs at least one step, got {steps}")
        if horizon <= 0.0:
            raise GridError(f"horizon must be positive, got {horizon}")
        start = 0 if include_origin else 1
        return cls.from_points(np.arange(start, steps + 1, dtype=np.float64) * (horizon / steps))

    def __len__(self) -> int:
        return int(self.points.size)

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def is_uniform(self) -> bool:
        if self.points.size < 2:
            return False
        steps = np.diff(self.points)
        return bool(np.allclose(steps, steps[0], rtol=UNIFORM_RTOL, atol=0.0))

    @property
    def step(self) -> float:
        if not self.is_uniform:
            raise GridError("grid is not uniform")
        return float((self.points[-1] - self.points[0]) / (self.points.size - 1))

    def image(self, exponent: float) -> "Grid":
        return Grid.from_points(np.power(self.points, exponent))

    def same_as(self, other: "Grid") -> bool:
        return self.points.shape == other.points.shape and bool(np.array_equal(self.points, other.points))

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.points - t)))

    def subsample(self, stride: int) -> "Grid":
        return Grid.from_points(self.points[::stride])


@dataclass(slots=True, eq=False)
class Path:
    grid: Grid
    values: NDArray[np.float64]
    process: str = ""
    seed: int | None = None
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != len(self.grid):
            raise GridError(f"path has {values.size} values for a {len(self.grid)}-point grid")
        self.values = values

    @property
    def times(self) -> NDArray[np.float64]:
        return self.grid.points

    def value_at(self, t: float) -> float:
        index = self.grid.nearest_index(t)
        if self.grid.points[index] != t:
            raise GridError(f"time {t} is not a grid point")
        return float(self.values[index])

    def scaled(self, factor: float) -> "Path":
        return Path(self.grid, factor * self.values, self.process, self.seed, [*self.provenance, f"scaled by {factor!r}"])

    def increments(self) -> NDArray[np.float64]:
        return np.diff(self.values)

    def subsample(self, stride: int) -> "Path":
        return Path(self.grid.subsample(stride), self.values[::stride], self.process, self.seed, list(self.provenance))
