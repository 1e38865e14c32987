#!/usr/bin/env python3
"""
Envelope route for exponential utility u(x) = -exp(-alpha x).

The claim enters through the probability weighting

    w(t) = (1 / E|u(claim)|) * int_0^t |u(Q_claim(1 - s))| ds,

the function f(z) = -(1 / E|u(claim)|) * int_0^{w^{-1}(1 - z)} Q_rho(s) ds is
replaced by its upper concave envelope delta, and the optimal quantile is
read off the envelope slope at z(t) = 1 - w(1 - t):

    Qbar(t) = C - ln(delta'(z(t))) / alpha,

with C fixed by the budget. No multiplier search is needed; the multiplier
is recovered afterwards from C.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from market_model import KernelLaw, kernel_quantile
from portfolio import TerminalMap
from preferences import ClaimSpec, UtilityModel, lagrangian_objective, validate_pairing, wellposedness_check
from quantile_core import Grid, QuantileFunction, pair_reversed
from vi_solver import RobustSolution

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class WeightingFunction:
    """w at the cell boundaries k/n, k = 0..n, linear in between."""

    grid: Grid
    values: NDArray[np.float64]
    normalizer: float

    def __post_init__(self):
        if not np.isfinite(self.normalizer) or self.normalizer <= 0.0:
            raise ValueError(f"E|u(claim)| must be positive and finite, got {self.normalizer}")
        if self.values.shape != (self.grid.n + 1,):
            raise ValueError("Weighting needs one value per cell boundary")
        if np.any(np.diff(self.values) < 0.0):
            raise ValueError("Weighting function must be non-decreasing")

    def __call__(self, t: ArrayLike) -> NDArray[np.float64]:
        return np.interp(t, self.grid.edges, self.values)

    def inverse(self, y: ArrayLike) -> NDArray[np.float64]:
        """Piecewise-linear inverse; flat spans map to their left endpoint."""
        y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
        edges, w = self.grid.edges, self.values
        k = np.clip(np.searchsorted(w, y, side="left"), 1, self.grid.n)
        left, right = w[k - 1], w[k]
        span = right - left
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(span > 0.0, (y - left) / span, 0.0)
        result = edges[k - 1] + np.clip(frac, 0.0, 1.0) * (edges[k] - edges[k - 1])
        return np.where(y <= w[0], edges[0], result)


@dataclass(frozen=True, eq=False)
class EnvelopeResult:
    """
    Upper concave envelope of points (z_j, f_j).

    delta[j] is the envelope at z_j, slopes[j] its slope on [z_j, z_{j+1})
    and hull_knots the indices where delta touches f.
    """

    z: NDArray[np.float64]
    f: NDArray[np.float64]
    delta: NDArray[np.float64]
    slopes: NDArray[np.float64]
    hull_knots: NDArray[np.int64]

    @property
    def on_hull(self) -> NDArray[np.bool_]:
        mask = np.zeros(self.z.size, dtype=bool)
        mask[self.hull_knots] = True
        return mask


@dataclass(eq=False)
class ExponentialSolution:
    """Envelope-route optimum with the objects it was built from."""

    solution: RobustSolution
    weighting: WeightingFunction
    envelope: EnvelopeResult
    delta_prime: NDArray[np.float64]
    terminal_map: Optional[TerminalMap] = None
    floor_binding: bool = False
    degenerate_claim: bool = field(default=False)


def _identity_weighting(grid: Grid, normalizer: float) -> WeightingFunction:
    return WeightingFunction(grid, np.array(grid.edges), normalizer)


def weighting(claim: ClaimSpec, alpha: float, grid: Grid) -> WeightingFunction:
    """Probability weighting generated by |u(claim)| for u = -exp(-alpha x)."""
    if claim.is_degenerate():
        raise ValueError("Claim is almost surely constant: use the classical solver")
    if alpha <= 0.0:
        raise ValueError(f"Risk aversion alpha must be positive, got {alpha}")
    theta = claim.quantile(grid).values
    if np.ptp(theta) == 0.0:
        raise ValueError("Claim quantile is constant on this grid: use the classical solver")
    mass = np.exp(-alpha * theta)
    cumulative = np.concatenate([[0.0], np.cumsum(mass[::-1])])
    values = cumulative / cumulative[-1]
    values[-1] = 1.0
    return WeightingFunction(grid, values, float(np.mean(mass)))


def envelope_input(
    claim: Union[ClaimSpec, WeightingFunction],
    alpha: float,
    law: Union[KernelLaw, QuantileFunction],
    grid: Grid,
):
    """
    Points (z_j, f_j) with z_j = 1 - w(1 - j/n), j = 0..n, and f the
    normalized negative partial integral of Q_rho up to w^{-1}(1 - z_j).
    Returns (z, f, weighting).
    """
    kernel_q = law if isinstance(law, QuantileFunction) else kernel_quantile(law, grid)
    w = claim if isinstance(claim, WeightingFunction) else weighting(claim, alpha, grid)

    z = 1.0 - w.values[::-1]
    z[0], z[-1] = 0.0, 1.0
    partial = np.concatenate([[0.0], np.cumsum(kernel_q.values)]) / grid.n
    upper = w.inverse(1.0 - z)
    f = -np.interp(upper, grid.edges, partial) / w.normalizer
    f[0] = -partial[-1] / w.normalizer
    f[-1] = 0.0
    return z, f, w


def concave_envelope(z: ArrayLike, f: ArrayLike) -> EnvelopeResult:
    """Upper concave envelope by a monotone-chain upper hull."""
    z = np.asarray(z, dtype=float)
    f = np.asarray(f, dtype=float)
    if z.size < 2 or z.shape != f.shape:
        raise ValueError("Envelope needs at least two points with matching coordinates")
    if np.any(np.diff(z) < 0.0):
        raise ValueError("Envelope abscissae must be sorted")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(f))):
        raise ValueError("Envelope input must be finite")

    hull = []
    for j in range(z.size):
        if hull and z[hull[-1]] == z[j]:
            if f[j] <= f[hull[-1]]:
                continue
            hull.pop()
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (z[a] - z[o]) * (f[j] - f[o]) - (f[a] - f[o]) * (z[j] - z[o])
            if cross >= 0.0:
                hull.pop()
            else:
                break
        hull.append(j)

    knots = np.array(hull, dtype=np.int64)
    hz, hf = z[knots], f[knots]
    segment_slopes = np.diff(hf) / np.diff(hz)
    delta = np.interp(z, hz, hf)
    delta[knots] = hf

    # right-continuous slope for each interval [z_j, z_{j+1})
    segment = np.clip(np.searchsorted(hz, z[:-1], side="right") - 1, 0, segment_slopes.size - 1)
    return EnvelopeResult(z, f, delta, segment_slopes[segment], knots)


def solve_exponential(
    x: float,
    claim: ClaimSpec,
    alpha: float,
    law: KernelLaw,
    grid: Optional[Grid] = None,
) -> ExponentialSolution:
    """
    Optimal quantile for exponential utility from the concave envelope.

    A constant claim uses the identity weighting, which gives the classical
    exponential solution. The nonnegativity floor is not imposed here; when
    the formula dips below zero the solution is flagged.
    """
    if not np.isfinite(x) or x <= 0.0:
        raise ValueError(f"Initial wealth must be positive, got {x}")
    grid = grid or Grid()
    utility = UtilityModel.exponential(alpha)
    validate_pairing(utility, claim)
    kernel_q = kernel_quantile(law, grid)
    rho_hat = kernel_q.reversed_values()

    degenerate = claim.is_degenerate()
    if degenerate:
        theta = claim.quantile(grid).values
        w = _identity_weighting(grid, float(np.mean(np.exp(-alpha * theta))))
    else:
        w = weighting(claim, alpha, grid)
    z, f, w = envelope_input(w, alpha, kernel_q, grid)
    envelope = concave_envelope(z, f)

    delta_prime = envelope.slopes
    if np.any(delta_prime <= 0.0) or not np.all(np.isfinite(delta_prime)):
        raise ValueError("Envelope slope reaches 0 or infinity inside (0, 1)")

    log_slope = np.log(delta_prime)
    mean_rho = float(np.mean(rho_hat))
    level = (x + float(np.mean(log_slope * rho_hat)) / alpha) / mean_rho
    values = level - log_slope / alpha
    lam = alpha * float(np.exp(-alpha * level))

    floor_binding = bool(values[0] < 0.0)
    if floor_binding:
        logger.warning(
            "Envelope quantile is negative at the first node (%.3e); the nonnegativity "
            "floor binds and the envelope route does not impose it", values[0],
        )
    qbar = QuantileFunction(grid, values)
    budget = pair_reversed(qbar, kernel_q)
    V_lambda = lagrangian_objective(qbar, lam, claim, utility, kernel_q)
    solution = RobustSolution(
        x=float(x),
        lam_star=lam,
        qbar=qbar,
        V0=V_lambda + lam * x,
        V_lambda=V_lambda,
        budget_residual=budget - x,
        wellposed_report=wellposedness_check(utility, law, lam),
    )
    logger.info("Envelope route: lambda=%.10g, %d hull knots", lam, envelope.hull_knots.size)
    return ExponentialSolution(
        solution=solution,
        weighting=w,
        envelope=envelope,
        delta_prime=delta_prime,
        terminal_map=TerminalMap(qbar, law, x) if not floor_binding else None,
        floor_binding=floor_binding,
        degenerate_claim=degenerate,
    )
