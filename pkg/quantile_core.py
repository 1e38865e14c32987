#!/usr/bin/env python3
"""
Quantile functions on a midpoint grid.

A quantile function (right-continuous inverse of a CDF) is stored by its
values at the nodes t_i = (i + 1/2)/n, i = 0..n-1, of a uniform grid on
(0, 1). Integrals over (0, 1) are midpoint sums. Because 1 - t_i = t_{n-1-i},
Q(1 - t_i) is the node array read backwards, which is what the budget
pairing needs.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

DEFAULT_GRID_SIZE = 4096

# Probabilities must sum to one within this tolerance
PROB_SUM_TOL = 1e-12
# Relative slack for rounding noise in monotonicity checks
MONOTONE_RTOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform midpoint grid with n cells on (0, 1)."""

    n: int = DEFAULT_GRID_SIZE

    def __post_init__(self):
        if isinstance(self.n, bool) or not isinstance(self.n, (int, np.integer)):
            raise ValueError(f"Grid size must be an integer, got {self.n!r}")
        if self.n < 2:
            raise ValueError(f"Grid size must be at least 2, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @cached_property
    def nodes(self) -> NDArray[np.float64]:
        nodes = (np.arange(self.n, dtype=float) + 0.5) / self.n
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def edges(self) -> NDArray[np.float64]:
        """Cell boundaries k/n, k = 0..n."""
        edges = np.arange(self.n + 1, dtype=float) / self.n
        edges.setflags(write=False)
        return edges

    def locate(self, u: ArrayLike) -> NDArray[np.int64]:
        """Index of the cell [k/n, (k+1)/n) containing u (right-continuous)."""
        u = np.asarray(u, dtype=float)
        return np.clip(np.floor(u * self.n), 0, self.n - 1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class QuantileFunction:
    """
    Right-continuous increasing function on (0, 1) sampled at grid nodes.

    Node i stands for the whole cell [i/n, (i+1)/n), so evaluation at an
    arbitrary u is a right-continuous step lookup.
    """

    grid: Grid
    values: NDArray[np.float64]
    value_at_0: Optional[float] = None
    left_limit_at_1: Optional[float] = None
    nonnegative: bool = field(default=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.shape[0] != self.grid.n:
            raise ValueError(
                f"Quantile has {values.shape[0]} values but the grid has {self.grid.n} nodes"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"Quantile value at node {bad} is not finite: {values[bad]}")

        steps = np.diff(values)
        slack = MONOTONE_RTOL * max(1.0, float(np.max(np.abs(values))))
        if steps.size and steps.min() < -slack:
            bad = int(np.argmin(steps))
            raise ValueError(
                f"Quantile decreases between nodes {bad} and {bad + 1} by {-steps[bad]:.3e}"
            )
        values = np.maximum.accumulate(values)

        if self.nonnegative and values[0] < 0.0:
            raise ValueError(f"Wealth quantile is negative at the first node: {values[0]}")

        value_at_0 = values[0] if self.value_at_0 is None else float(self.value_at_0)
        left_limit_at_1 = values[-1] if self.left_limit_at_1 is None else float(self.left_limit_at_1)
        if value_at_0 > values[0] or left_limit_at_1 < values[-1]:
            raise ValueError("Quantile end limits must bracket the node values")

        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "value_at_0", float(value_at_0))
        object.__setattr__(self, "left_limit_at_1", float(left_limit_at_1))

    def __call__(self, u: ArrayLike) -> NDArray[np.float64]:
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise ValueError("Quantile functions are evaluated on the open interval (0, 1)")
        return self.values[self.grid.locate(u)]

    def reversed_values(self) -> NDArray[np.float64]:
        """Q(1 - t_i) at every node."""
        return self.values[::-1]

    def mean(self) -> float:
        """Midpoint integral of Q over (0, 1)."""
        return float(np.mean(self.values))

    def with_values(self, values: ArrayLike, **kwargs) -> "QuantileFunction":
        return QuantileFunction(self.grid, np.asarray(values, dtype=float), **kwargs)


def constant(value: float, grid: Grid) -> QuantileFunction:
    """Quantile of a point mass."""
    return QuantileFunction(grid, np.full(grid.n, float(value)), value, value)


def right_inverse(
    sorted_values: NDArray[np.float64], cumulative: NDArray[np.float64], u: ArrayLike
) -> NDArray[np.float64]:
    """inf{x : F(x) > u} for a discrete CDF given by sorted atoms and cumulative mass."""
    idx = np.searchsorted(cumulative, np.asarray(u, dtype=float), side="right")
    return sorted_values[np.minimum(idx, sorted_values.shape[0] - 1)]


def atom_table(values: Sequence[float], probs: Sequence[float]):
    """Sorted distinct atoms with positive mass and their cumulative probabilities."""
    values = np.asarray(values, dtype=float).reshape(-1)
    probs = np.asarray(probs, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("Atom list is empty")
    if values.shape != probs.shape:
        raise ValueError(f"Got {values.size} atom values but {probs.size} probabilities")
    if not np.all(np.isfinite(values)):
        raise ValueError("Atom values must be finite")
    if np.any(probs < 0.0) or not np.all(np.isfinite(probs)):
        raise ValueError(f"Atom probabilities must be nonnegative, got {probs.tolist()}")
    total = float(np.sum(probs))
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"Atom probabilities sum to {total!r}, not 1")

    keep = probs > 0.0
    values, probs = values[keep], probs[keep]
    distinct, inverse = np.unique(values, return_inverse=True)
    mass = np.bincount(inverse, weights=probs, minlength=distinct.size)
    cumulative = np.cumsum(mass)
    cumulative /= cumulative[-1]
    return distinct, cumulative


def from_atoms(values: Sequence[float], probs: Sequence[float], grid: Grid) -> QuantileFunction:
    """Right-continuous inverse of a discrete CDF, sampled at the grid nodes."""
    distinct, cumulative = atom_table(values, probs)
    return QuantileFunction(
        grid,
        right_inverse(distinct, cumulative, grid.nodes),
        value_at_0=distinct[0],
        left_limit_at_1=distinct[-1],
    )


def from_ppf(
    ppf: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    grid: Grid,
    value_at_0: Optional[float] = None,
    left_limit_at_1: Optional[float] = None,
) -> QuantileFunction:
    """Quantile of a continuous law given its inverse CDF."""
    return QuantileFunction(grid, ppf(grid.nodes), value_at_0, left_limit_at_1)


def pair_reversed(q_a: QuantileFunction, q_b: QuantileFunction) -> float:
    """Midpoint rule for the integral of Q_a(t) * Q_b(1 - t) over (0, 1)."""
    if q_a.grid != q_b.grid:
        raise ValueError(f"Grid mismatch: {q_a.grid.n} vs {q_b.grid.n} nodes")
    return float(np.mean(q_a.values * q_b.reversed_values()))
