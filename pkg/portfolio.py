#!/usr/bin/env python3
"""
Optimal wealth process and feedback portfolio for deterministic coefficients.

The optimal terminal wealth is X* = Qbar(1 - F_rho(rho)). Given varrho(t) = y
the rest of the kernel is an independent log-normal factor R, so

    Y(t, y) = E[R * X*(y R)]

is a one-dimensional Gaussian integral (Gauss-Hermite). The portfolio is

    pi(t) = (sigma(t)^T)^{-1} theta(t) * (X(t) - d phi / d y (t, varrho(t))),

with phi(t, y) = y * Y(t, y) differentiated by central differences.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import norm

from market_model import KernelLaw, KernelPaths, MarketSpec, residual_law, simulate_kernel
from quantile_core import QuantileFunction

logger = logging.getLogger(__name__)

DEFAULT_HERMITE_NODES = 64
FD_REL_STEP = 1e-5
# Finite differences with h and 2h must agree to this relative level
FD_AGREEMENT = 1e-2
FD_MAX_WIDENINGS = 3
MONITOR_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@lru_cache(maxsize=8)
def _hermite_rule(n_nodes: int) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Nodes and weights for E[g(Z)], Z standard normal."""
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    return nodes * np.sqrt(2.0), weights / np.sqrt(np.pi)


class TerminalMap:
    """
    X*(rho) = Qbar(1 - F_rho(rho)), evaluated in normal-score coordinates.

    With u = 1 - F_rho(rho) the score Phi^{-1}(u) equals (m - ln rho) / s.
    Qbar is interpolated linearly between node scores Phi^{-1}(t_i) and
    extrapolated linearly beyond the end nodes, then floored at 0.
    """

    def __init__(self, qbar: QuantileFunction, law: KernelLaw, x: Optional[float] = None):
        self.qbar = qbar
        self.law = law
        self.x = x
        self._scores = norm.ppf(qbar.grid.nodes)
        values = qbar.values
        self._values = values
        self._left_slope = (values[1] - values[0]) / (self._scores[1] - self._scores[0])
        self._right_slope = (values[-1] - values[-2]) / (self._scores[-1] - self._scores[-2])

    def at_score(self, score: ArrayLike) -> NDArray[np.float64]:
        score = np.asarray(score, dtype=float)
        s, v = self._scores, self._values
        out = np.interp(score, s, v)
        out = np.where(score < s[0], v[0] + self._left_slope * (score - s[0]), out)
        out = np.where(score > s[-1], v[-1] + self._right_slope * (score - s[-1]), out)
        return np.maximum(out, 0.0)

    def __call__(self, rho: ArrayLike) -> NDArray[np.float64]:
        rho = np.asarray(rho, dtype=float)
        return self.at_score((self.law.m - np.log(rho)) / self.law.s)


@dataclass
class WealthState:
    """Wealth and holdings at one time for one kernel value."""

    t: float
    varrho_t: float
    Y_t: float
    pi_t: NDArray[np.float64]


def wealth(
    t: float,
    varrho_t: ArrayLike,
    terminal_map: TerminalMap,
    market: MarketSpec,
    n_nodes: int = DEFAULT_HERMITE_NODES,
) -> NDArray[np.float64]:
    """Optimal wealth Y(t) = E[R X*(varrho_t R)] given varrho(t) = varrho_t."""
    m, s = residual_law(market, t)
    y = np.asarray(varrho_t, dtype=float)
    if np.any(y <= 0.0):
        raise ValueError("Kernel values must be positive")
    if s == 0.0:
        growth = np.exp(m)
        return growth * terminal_map(y * growth)
    z, weights = _hermite_rule(n_nodes)
    growth = np.exp(m + s * z)
    payoff = terminal_map(y[..., np.newaxis] * growth)
    return (payoff * growth) @ weights


def _phi(t, y, terminal_map, market, n_nodes):
    return y * wealth(t, y, terminal_map, market, n_nodes)


def hedge_slope(
    t: float,
    varrho_t: ArrayLike,
    terminal_map: TerminalMap,
    market: MarketSpec,
    rel_step: float = FD_REL_STEP,
    n_nodes: int = DEFAULT_HERMITE_NODES,
) -> NDArray[np.float64]:
    """
    d phi / d y at y = varrho_t by central differences.

    Where the h and 2h estimates disagree (kinks of X* near maturity) the
    step is widened tenfold, up to three times, with a warning.
    """
    y = np.asarray(varrho_t, dtype=float)
    h = np.maximum(rel_step * y, np.finfo(float).tiny ** 0.5)

    def central(step):
        return (_phi(t, y + step, terminal_map, market, n_nodes)
                - _phi(t, y - step, terminal_map, market, n_nodes)) / (2.0 * step)

    slope = central(h)
    for _ in range(FD_MAX_WIDENINGS):
        wide = central(2.0 * h)
        rough = np.abs(slope - wide) > FD_AGREEMENT * (1.0 + np.abs(slope))
        if not np.any(rough):
            break
        logger.warning(
            "Finite-difference slope unstable at t=%.6g for %d kernel values; widening step",
            t, int(np.count_nonzero(rough)),
        )
        h = np.where(rough, np.minimum(10.0 * h, 0.5 * y), h)
        slope = np.where(rough, central(h), slope)
    return slope


def feedback_portfolio(
    t: float,
    varrho_t: ArrayLike,
    market: MarketSpec,
    terminal_map: TerminalMap,
    current_wealth: Optional[ArrayLike] = None,
    rel_step: float = FD_REL_STEP,
) -> NDArray[np.float64]:
    """
    Dollar holdings in the stocks, (sigma^T)^{-1} theta * (X - d phi / d y).

    current_wealth defaults to the model wealth Y(t, varrho_t). Returns shape
    (m,) for a scalar kernel value and (N, m) for N values.
    """
    y = np.asarray(varrho_t, dtype=float)
    if current_wealth is None:
        current_wealth = wealth(t, y, terminal_map, market)
    exposure = np.asarray(current_wealth, dtype=float) - hedge_slope(t, y, terminal_map, market, rel_step)
    return exposure[..., np.newaxis] * market.exposure_direction(t)


def wealth_state(t: float, varrho_t: float, terminal_map: TerminalMap, market: MarketSpec) -> WealthState:
    """Model wealth and holdings at one (t, varrho(t)) point."""
    Y_t = float(wealth(t, varrho_t, terminal_map, market))
    pi_t = feedback_portfolio(t, varrho_t, market, terminal_map, current_wealth=Y_t)
    return WealthState(float(t), float(varrho_t), Y_t, pi_t)


def martingale_integrand(
    t: float, varrho_t: ArrayLike, market: MarketSpec, terminal_map: TerminalMap
) -> NDArray[np.float64]:
    """Z(t) = -d phi / d y * varrho(t) * theta(t) of d(varrho Y) = Z dW."""
    y = np.asarray(varrho_t, dtype=float)
    slope = hedge_slope(t, y, terminal_map, market)
    return (-slope * y)[..., np.newaxis] * market.theta.at(t)


def _roll_wealth(paths: KernelPaths, market: MarketSpec, terminal_map: TerminalMap, x: float) -> NDArray:
    """Euler scheme for the wealth equation driven by the kernel shocks."""
    rate_steps, var_steps = market.step_integrals(paths.times)
    X = np.empty((paths.n_paths, paths.n_steps + 1))
    X[:, 0] = x
    for k in range(paths.n_steps):
        t = float(paths.times[k])
        hedge = X[:, k] - hedge_slope(t, paths.varrho[:, k], terminal_map, market)
        X[:, k + 1] = X[:, k] * (1.0 + rate_steps[k]) + hedge * (var_steps[k] + paths.shocks[:, k])
    return X


def replication_errors(paths: KernelPaths, market: MarketSpec, terminal_map: TerminalMap, x: float):
    X = _roll_wealth(paths, market, terminal_map, x)
    target = terminal_map(paths.varrho[:, -1])
    return X, target, X[:, -1] - target


def replicate_and_verify(
    market: MarketSpec,
    terminal_map: TerminalMap,
    n_paths: int,
    n_steps: int,
    seed: int,
    x: Optional[float] = None,
    n_workers: int = 1,
    keep_paths: bool = False,
) -> Dict[str, Any]:
    """
    Simulate the kernel, trade with the feedback portfolio from X(0) = x
    and compare X(T) with X*(varrho(T)).
    """
    if n_steps < 16:
        raise ValueError(f"Replication needs at least 16 steps, got {n_steps}")
    x = terminal_map.x if x is None else x
    if x is None:
        raise ValueError("Initial wealth is required when the terminal map carries none")

    paths = simulate_kernel(market, n_paths, n_steps, seed, n_workers)
    X, target, error = replication_errors(paths, market, terminal_map, x)
    mean_target = float(np.mean(target))
    rmse = float(np.sqrt(np.mean(error ** 2)))

    deflated = paths.varrho * X
    monitor = []
    for fraction in MONITOR_FRACTIONS:
        k = int(round(fraction * n_steps))
        sample = deflated[:, k]
        se = float(np.std(sample, ddof=1) / np.sqrt(n_paths))
        monitor.append({
            "t": float(paths.times[k]),
            "mean": float(np.mean(sample)),
            "standard_error": se,
            "z_score": float((np.mean(sample) - x) / se) if se > 0.0 else 0.0,
        })

    order = np.argsort(paths.varrho[:, -1])
    anti_monotone = bool(np.all(np.diff(target[order]) <= 0.0))

    report = {
        "n_paths": n_paths,
        "n_steps": n_steps,
        "seed": seed,
        "mean_terminal_wealth": mean_target,
        "terminal_rmse": rmse,
        "relative_rmse": rmse / mean_target if mean_target > 0.0 else float("inf"),
        "pathwise_max_err": float(np.max(np.abs(error))),
        "budget_gap": float(abs(X[0, 0] - x)),
        "model_budget_gap": float(abs(wealth(0.0, 1.0, terminal_map, market) - x)),
        "martingale_checks": monitor,
        "max_martingale_z": max(abs(item["z_score"]) for item in monitor),
        "anti_monotone": anti_monotone,
    }
    if keep_paths:
        report["paths"] = paths
        report["wealth_paths"] = X
    logger.info("Replication RMSE %.3e (%.3f%% of mean terminal wealth)", rmse,
                100.0 * report["relative_rmse"])
    return report


def convergence_ladder(
    market: MarketSpec,
    terminal_map: TerminalMap,
    n_paths: int,
    ladder: Sequence[int] = (32, 64, 128, 256),
    seed: int = 0,
    x: Optional[float] = None,
) -> Dict[str, Any]:
    """
    Terminal RMSE over a doubling ladder of step counts on coupled paths:
    the finest level is simulated once and aggregated for coarser ones.
    """
    x = terminal_map.x if x is None else x
    ladder = sorted(int(n) for n in ladder)
    finest = simulate_kernel(market, n_paths, ladder[-1], seed)
    rmse = []
    for n_steps in ladder:
        if ladder[-1] % n_steps:
            raise ValueError(f"Ladder level {n_steps} does not divide {ladder[-1]}")
        paths = finest.coarsen(ladder[-1] // n_steps)
        _, _, error = replication_errors(paths, market, terminal_map, x)
        rmse.append(float(np.sqrt(np.mean(error ** 2))))
    ratios = [rmse[k + 1] / rmse[k] for k in range(len(rmse) - 1)]
    return {"steps": ladder, "rmse": rmse, "ratios": ratios}
