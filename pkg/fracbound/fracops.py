"""
L1 discretisation of the Caputo derivative and of the distributed-order
derivative D^(nu) = int Caputo^beta nu(dbeta)
"""
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

from .mixing import MixingMeasure, nu_rule
from .tools import DEFAULT_TOLERANCES, DomainError, FloatArray, Tolerances

# Relative tolerance when matching a requested time against the grid
GRID_MATCH = 1e-12


@dataclass(frozen=True, eq=False)
class TimeSeriesFn:
    grid: FloatArray
    values: FloatArray

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if grid.ndim != 1 or grid.size < 2:
            raise DomainError("A time series needs at least two grid times")
        if grid[0] != 0:
            raise DomainError("Time grids must start at 0")
        if np.any(np.diff(grid) <= 0):
            raise DomainError("Time grids must be strictly increasing")
        if values.shape != grid.shape or not np.all(np.isfinite(values)):
            raise DomainError("One finite value is needed per grid time")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(
        cls, function: Callable[[FloatArray], Any], grid: Sequence[float]
    ) -> "TimeSeriesFn":
        grid_array = np.asarray(grid, dtype=np.float64)
        return cls(grid_array, np.asarray(function(grid_array), dtype=float))

    def index_of(self, t: float) -> int:
        index = int(np.searchsorted(self.grid, t))
        scale = GRID_MATCH * max(1.0, abs(t))
        for candidate in (index - 1, index):
            if (
                0 <= candidate < self.grid.size
                and abs(self.grid[candidate] - t) <= scale
            ):
                return candidate
        raise DomainError(f"t={t} is not a node of the time grid")


def uniform_grid(t_end: float, steps: int) -> FloatArray:
    if t_end <= 0 or steps < 1:
        raise DomainError("Grids need t_end > 0 and at least one step")
    return np.linspace(0.0, t_end, steps + 1)


def graded_grid(t_end: float, steps: int, grading: float = 1.0) -> FloatArray:
    """
    t_k = t_end (k / K)^grading, clustering nodes near 0 when grading > 1
    """
    if grading < 1:
        raise DomainError("The grading exponent must be >= 1")
    return t_end * (uniform_grid(1.0, steps) ** grading)


def _check_order(beta: float) -> None:
    if not 0 < beta < 1:
        raise DomainError(f"Caputo orders must lie in (0, 1), got {beta}")


def caputo_at_indices(
    f: TimeSeriesFn, betas: Sequence[float], indices: Sequence[int]
) -> FloatArray:
    """
    L1 Caputo derivatives, shape (len(betas), len(indices)). The scheme
    integrates the piecewise-linear interpolant of f exactly.
    """
    beta_array = np.asarray(betas, dtype=np.float64)
    for beta in beta_array:
        _check_order(float(beta))
    grid = f.grid
    slopes = np.diff(f.values) / np.diff(grid)
    exponent = (1 - beta_array)[:, None]
    result = np.zeros((beta_array.size, len(indices)))
    for column, index in enumerate(indices):
        if index < 1 or index >= grid.size:
            raise DomainError(
                f"Caputo derivatives need a grid index >= 1, got {index}"
            )
        t_n = grid[index]
        left = (t_n - grid[:index])[None, :] ** exponent
        right = (t_n - grid[1 : index + 1])[None, :] ** exponent
        result[:, column] = (left - right) @ slopes[:index]
    return result / special.gamma(2 - beta_array)[:, None]


def caputo(f: TimeSeriesFn, beta: float, t: float) -> float:
    _check_order(beta)
    index = f.index_of(t)
    return float(caputo_at_indices(f, [beta], [index])[0, 0])


def distributed_caputo_matrix(
    grid: FloatArray,
    values: FloatArray,
    m: MixingMeasure,
    indices: Sequence[int],
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> FloatArray:
    """
    D^(nu) of every column of `values` (shape (K, P), one row per grid
    time), shape (len(indices), P)
    """
    rule = nu_rule(m, tolerances.beta_nodes)
    table = np.asarray(values, dtype=np.float64)
    if table.ndim == 1:
        table = table[:, None]
    slopes = np.diff(table, axis=0) / np.diff(grid)[:, None]
    exponent = (1 - rule.betas)[:, None]
    scale = rule.nu_weights / special.gamma(2 - rule.betas)
    result = np.zeros((len(indices), table.shape[1]))
    for row, index in enumerate(indices):
        if index < 1 or index >= grid.size:
            raise DomainError(
                f"Caputo derivatives need a grid index >= 1, got {index}"
            )
        t_n = grid[index]
        left = (t_n - grid[:index])[None, :] ** exponent
        right = (t_n - grid[1 : index + 1])[None, :] ** exponent
        # Fixed summation order over the beta nodes
        result[row] = (scale @ (left - right)) @ slopes[:index]
    return result


def distributed_caputo_at_indices(
    f: TimeSeriesFn,
    m: MixingMeasure,
    indices: Sequence[int],
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> FloatArray:
    return distributed_caputo_matrix(
        f.grid, f.values, m, indices, tolerances
    )[:, 0]


def distributed_caputo(
    f: TimeSeriesFn,
    m: MixingMeasure,
    t: float,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> float:
    index = f.index_of(t)
    return float(distributed_caputo_at_indices(f, m, [index], tolerances)[0])
