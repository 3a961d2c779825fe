"""Uniform time grids and piecewise-linear grid functions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid

from QDSolve.core.errors import GridMismatchError


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ValueError(f"TimeGrid needs N >= 2, got {self.N}")
        if not self.T > 0:
            raise ValueError(f"TimeGrid needs T > 0, got {self.T}")

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N)

    @property
    def step(self) -> float:
        return self.T / (self.N - 1)

    @cached_property
    def weights(self) -> np.ndarray:
        """Composite trapezoid weights."""
        w = np.full(self.N, self.step)
        w[0] = w[-1] = 0.5 * self.step
        return w

    def same_as(self, other: "TimeGrid") -> bool:
        return self.N == other.N and abs(self.T - other.T) <= 1e-12 * max(1.0, self.T)


@dataclass(frozen=True)
class GridFunction:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != self.grid.N:
            raise GridMismatchError(
                f"values of shape {np.shape(self.values)} do not align with {self.grid.N} nodes"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: TimeGrid, d: int) -> "GridFunction":
        return cls(grid, np.zeros((grid.N, d)))

    @classmethod
    def constant(cls, grid: TimeGrid, vector: Sequence[float]) -> "GridFunction":
        row = np.asarray(vector, dtype=float).reshape(1, -1)
        return cls(grid, np.repeat(row, grid.N, axis=0))

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float).reshape(grid.N, -1))

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def component(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def __call__(self, t: float) -> np.ndarray:
        tt = np.asarray(t, dtype=float)
        tol = 1e-12 * self.grid.T
        if np.any(tt < -tol) or np.any(tt > self.grid.T + tol):
            raise ValueError(f"t={t} outside [0, {self.grid.T}]")
        out = np.stack([np.interp(tt, self.grid.nodes, self.values[:, j]) for j in range(self.d)], axis=-1)
        return out

    def _check_compatible(self, other: "GridFunction") -> None:
        if not self.grid.same_as(other.grid):
            raise GridMismatchError(f"grid (T={self.grid.T}, N={self.grid.N}) vs (T={other.grid.T}, N={other.grid.N})")
        if self.d != other.d:
            raise GridMismatchError(f"component count {self.d} vs {other.d}")

    def inner(self, other: "GridFunction") -> float:
        self._check_compatible(other)
        return quadrature(GridFunction(self.grid, np.sum(self.values * other.values, axis=1)))

    def l2_norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, values)


def cumulative_integral(z: GridFunction) -> GridFunction:
    """Node i holds the trapezoid integral of z over [0, t_i]."""
    prefix = cumulative_trapezoid(z.values, x=z.grid.nodes, axis=0, initial=0.0)
    return GridFunction(z.grid, prefix)


def quadrature(f: GridFunction) -> float:
    """Composite trapezoid of a scalar grid function.

    Shares the segment sums with :func:`cumulative_integral`, so the end
    value of the prefix integral equals this number bit for bit.
    """
    if f.d != 1:
        raise GridMismatchError(f"quadrature expects a scalar grid function, got {f.d} components")
    return float(cumulative_integral(f).values[-1, 0])


def quadrature_components(f: GridFunction) -> np.ndarray:
    return np.array(cumulative_integral(f).values[-1, :])


def tail_integral_adjoint(grid: TimeGrid, s: np.ndarray) -> np.ndarray:
    """Adjoint of the trapezoid prefix integral applied to node data ``s``.

    Returns ``a`` with ``sum_m s[m] * (P z)[m] == sum_k a[k] * z[k]`` for the
    prefix operator ``P`` of :func:`cumulative_integral`.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    h = grid.step
    # S[j] = sum_{m >= j} s[m], with S[N] = 0
    tail = np.vstack([np.cumsum(s[::-1], axis=0)[::-1], np.zeros((1, s.shape[1]))])
    out = 0.5 * h * tail[1:]
    out[1:] += 0.5 * h * tail[1:-1]
    return out


def interpolate_directions(samples: Sequence[Tuple[float, Sequence[float]]], grid: Optional[TimeGrid] = None) -> GridFunction:
    """Piecewise-linear interpolant through per-node direction samples."""
    times = np.asarray([t for t, _ in samples], dtype=float)
    rows = np.asarray([np.asarray(v, dtype=float).ravel() for _, v in samples], dtype=float)
    if grid is None:
        grid = TimeGrid(float(times[-1]), len(samples))
    if len(samples) != grid.N or not np.allclose(times, grid.nodes, atol=1e-12 * grid.T):
        raise GridMismatchError("direction samples must be given at every grid node")
    return GridFunction(grid, rows)


def axpy(a: float, x: GridFunction, y: GridFunction) -> GridFunction:
    x._check_compatible(y)
    return GridFunction(y.grid, a * x.values + y.values)


def interpolant_l2_distance(f: GridFunction, reference: Callable[[np.ndarray], np.ndarray], refine: int = 64) -> float:
    """Squared L² distance between the interpolant of ``f`` and ``reference``.

    Each grid interval is split into ``refine`` sub-intervals and integrated
    with the trapezoid rule; jumps of ``reference`` inside an interval are
    resolved up to the sub-interval width.
    """
    fine = np.linspace(0.0, f.grid.T, (f.grid.N - 1) * refine + 1)
    diff = f(fine) - np.asarray(reference(fine), dtype=float).reshape(fine.size, -1)
    sq = np.sum(diff * diff, axis=1)
    return float(cumulative_trapezoid(sq, x=fine, initial=0.0)[-1])


def to_csv_rows(grid: TimeGrid, columns: List[np.ndarray]) -> np.ndarray:
    return np.column_stack([grid.nodes] + [np.asarray(c, dtype=float) for c in columns])
