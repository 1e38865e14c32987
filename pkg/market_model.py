#!/usr/bin/env python3
"""
Deterministic-coefficient complete market and its pricing kernel.

The market has a bond with rate r(t) and m stocks with volatility matrix
sigma(t); theta(t) is the market price of risk. All coefficients are
piecewise constant in time, so the log of the pricing kernel is Gaussian
with mean -int(r + |theta|^2/2) and variance int |theta|^2.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import norm

from quantile_core import Grid, QuantileFunction

logger = logging.getLogger(__name__)

# Paths per random substream; output does not depend on the worker count
PATH_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """
    Right-continuous step function of time.

    breaks holds 0 = b_0 < b_1 < ... < b_K = T and values[k] applies on
    [b_k, b_{k+1}); the last piece also covers t = T. Values may be scalars,
    vectors or matrices.
    """

    breaks: NDArray[np.float64]
    values: NDArray[np.float64]

    def __post_init__(self):
        breaks = np.array(self.breaks, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float)
        if breaks.size < 2:
            raise ValueError("A piecewise-constant function needs at least two breakpoints")
        if breaks[0] != 0.0:
            raise ValueError(f"First breakpoint must be 0, got {breaks[0]}")
        if np.any(np.diff(breaks) <= 0.0):
            raise ValueError(f"Breakpoints must be strictly increasing: {breaks.tolist()}")
        if values.shape[0] != breaks.size - 1:
            raise ValueError(
                f"Got {values.shape[0]} pieces for {breaks.size - 1} intervals"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("Piecewise-constant values must be finite")
        breaks.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, horizon: float, value: ArrayLike) -> "PiecewiseConstant":
        return cls(np.array([0.0, horizon]), np.asarray(value, dtype=float)[np.newaxis, ...])

    @property
    def horizon(self) -> float:
        return float(self.breaks[-1])

    def piece_index(self, t: ArrayLike) -> NDArray[np.int64]:
        idx = np.searchsorted(self.breaks, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.values.shape[0] - 1)

    def at(self, t: float) -> NDArray[np.float64]:
        return self.values[int(self.piece_index(t))]

    def cumulative(self, t: ArrayLike) -> NDArray[np.float64]:
        """Integral from 0 to t of a scalar step function (vectorized over t)."""
        if self.values.ndim != 1:
            raise ValueError("cumulative() needs scalar pieces")
        t = np.asarray(t, dtype=float)
        lengths = np.diff(self.breaks)
        covered = np.clip(t[..., np.newaxis] - self.breaks[:-1], 0.0, lengths)
        return covered @ self.values

    def integrate(self, a: float, b: float) -> float:
        return float(self.cumulative(b) - self.cumulative(a))


@dataclass(frozen=True, eq=False)
class MarketSpec:
    """Horizon, short rate, market price of risk and volatility matrix."""

    horizon: float
    rate: PiecewiseConstant
    theta: PiecewiseConstant
    sigma: PiecewiseConstant

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0.0:
            raise ValueError(f"Horizon T must be positive, got {self.horizon}")
        for name in ("rate", "theta", "sigma"):
            piece = getattr(self, name)
            if not np.isclose(piece.horizon, self.horizon, rtol=0.0, atol=1e-12):
                raise ValueError(
                    f"{name} pieces end at {piece.horizon}, not at the horizon {self.horizon}"
                )
        if self.rate.values.ndim != 1:
            raise ValueError("Rate pieces must be scalars")
        if self.theta.values.ndim != 2:
            raise ValueError("Market price of risk pieces must be vectors")
        n_assets = self.theta.values.shape[1]
        if self.sigma.values.shape[1:] != (n_assets, n_assets):
            raise ValueError(
                f"Volatility pieces must be {n_assets}x{n_assets} matrices, "
                f"got shape {self.sigma.values.shape[1:]}"
            )
        for k, matrix in enumerate(self.sigma.values):
            if np.linalg.matrix_rank(matrix) < n_assets:
                raise ValueError(f"Volatility matrix on piece {k} is singular")

    @classmethod
    def constant(
        cls,
        horizon: float,
        rate: float,
        theta: Union[float, Sequence[float]],
        sigma: Optional[ArrayLike] = None,
    ) -> "MarketSpec":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if sigma is None:
            sigma = np.eye(theta.size)
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        return cls(
            horizon,
            PiecewiseConstant.constant(horizon, rate),
            PiecewiseConstant.constant(horizon, theta),
            PiecewiseConstant.constant(horizon, sigma),
        )

    @classmethod
    def from_drift(
        cls,
        horizon: float,
        rate: float,
        drift: Sequence[float],
        sigma: ArrayLike,
    ) -> "MarketSpec":
        """Market with stock drifts beta: theta = sigma^{-1} (beta - r 1)."""
        drift = np.atleast_1d(np.asarray(drift, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        theta = np.linalg.solve(sigma, drift - rate)
        return cls.constant(horizon, rate, theta, sigma)

    @property
    def n_assets(self) -> int:
        return int(self.theta.values.shape[1])

    @cached_property
    def theta_squared(self) -> PiecewiseConstant:
        return PiecewiseConstant(self.theta.breaks, np.sum(self.theta.values ** 2, axis=1))

    def exposure_direction(self, t: float) -> NDArray[np.float64]:
        """(sigma(t)^T)^{-1} theta(t): dollar holdings per unit of hedge exposure."""
        return np.linalg.solve(self.sigma.at(t).T, self.theta.at(t))

    def step_integrals(self, times: NDArray[np.float64]) -> Tuple[NDArray, NDArray]:
        """Per-step integrals of r and |theta|^2 over a time grid."""
        return np.diff(self.rate.cumulative(times)), np.diff(self.theta_squared.cumulative(times))


@dataclass(frozen=True)
class KernelLaw:
    """ln(rho) ~ Normal(m, s^2)."""

    m: float
    s: float

    def __post_init__(self):
        if not np.isfinite(self.m):
            raise ValueError(f"Kernel log-mean must be finite, got {self.m}")
        if not np.isfinite(self.s) or self.s <= 0.0:
            raise ValueError(f"Kernel log-volatility must be positive, got {self.s}")

    def mean(self) -> float:
        return float(np.exp(self.m + 0.5 * self.s ** 2))

    def cdf(self, y: ArrayLike) -> NDArray[np.float64]:
        return norm.cdf((np.log(y) - self.m) / self.s)

    def ppf(self, u: ArrayLike) -> NDArray[np.float64]:
        return np.exp(self.m + self.s * norm.ppf(u))

    def upper_ppf(self, tail: ArrayLike) -> NDArray[np.float64]:
        """Q_rho(1 - tail), accurate for tiny tails."""
        return np.exp(self.m + self.s * norm.isf(tail))


def kernel_law(market: MarketSpec) -> KernelLaw:
    """Log-normal law of the terminal pricing kernel."""
    variance = market.theta_squared.integrate(0.0, market.horizon)
    if variance <= 0.0:
        raise ValueError("Market price of risk is identically zero: the pricing kernel is degenerate")
    m = -market.rate.integrate(0.0, market.horizon) - 0.5 * variance
    return KernelLaw(m, float(np.sqrt(variance)))


def residual_law(market: MarketSpec, t: float) -> Tuple[float, float]:
    """Mean and standard deviation of ln(rho / varrho(t)); the deviation may be 0."""
    if t < 0.0 or t > market.horizon:
        raise ValueError(f"Time {t} lies outside [0, {market.horizon}]")
    variance = market.theta_squared.integrate(t, market.horizon)
    m = -market.rate.integrate(t, market.horizon) - 0.5 * variance
    return m, float(np.sqrt(max(variance, 0.0)))


def kernel_quantile(law: KernelLaw, grid: Grid) -> QuantileFunction:
    """Q_rho(t) = exp(m + s * Phi^{-1}(t)) at the grid nodes."""
    return QuantileFunction(grid, law.ppf(grid.nodes), value_at_0=0.0, left_limit_at_1=np.inf)


@dataclass(frozen=True, eq=False)
class KernelPaths:
    """
    Simulated kernel paths on a uniform time grid.

    shocks[:, k] is the scalar Gaussian increment of int theta^T dW over
    step k; it has variance int |theta|^2 over the step and drives both the
    kernel and the wealth equation.
    """

    times: NDArray[np.float64]
    varrho: NDArray[np.float64]
    shocks: NDArray[np.float64]

    @property
    def n_paths(self) -> int:
        return int(self.varrho.shape[0])

    @property
    def n_steps(self) -> int:
        return int(self.shocks.shape[1])

    def coarsen(self, factor: int) -> "KernelPaths":
        """Same paths on a grid with factor-times larger steps."""
        if factor < 1 or self.n_steps % factor:
            raise ValueError(f"Cannot coarsen {self.n_steps} steps by a factor of {factor}")
        shocks = self.shocks.reshape(self.n_paths, -1, factor).sum(axis=2)
        return KernelPaths(self.times[::factor], self.varrho[:, ::factor], shocks)


def _standard_normal_block(seed: int, block: int, n_rows: int, n_steps: int) -> NDArray[np.float64]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, block]))
    return rng.standard_normal((n_rows, n_steps))


def simulate_kernel(
    market: MarketSpec,
    n_paths: int,
    n_steps: int,
    seed: int,
    n_workers: int = 1,
) -> KernelPaths:
    """
    Exact simulation of varrho on a uniform grid.

    Normal draws for paths [b*PATH_BLOCK, (b+1)*PATH_BLOCK) come from the
    substream keyed by (seed, b), so the result is bit-identical for any
    number of workers.
    """
    if n_paths < 1 or n_steps < 1:
        raise ValueError(f"Need n_paths >= 1 and n_steps >= 1, got {n_paths}, {n_steps}")

    times = np.linspace(0.0, market.horizon, n_steps + 1)
    rate_steps, var_steps = market.step_integrals(times)

    blocks = [
        (b, min(PATH_BLOCK, n_paths - b * PATH_BLOCK))
        for b in range(-(-n_paths // PATH_BLOCK))
    ]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            draws = list(pool.map(lambda job: _standard_normal_block(seed, job[0], job[1], n_steps), blocks))
    else:
        draws = [_standard_normal_block(seed, b, rows, n_steps) for b, rows in blocks]

    shocks = np.vstack(draws) * np.sqrt(var_steps)
    log_steps = -(rate_steps + 0.5 * var_steps) - shocks
    log_varrho = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(log_steps, axis=1)], axis=1)
    logger.debug("Simulated %d kernel paths with %d steps (seed %d)", n_paths, n_steps, seed)
    return KernelPaths(times, np.exp(log_varrho), shocks)
