#!/usr/bin/env python3
"""
General-utility solver for the Lagrangian quantile problem.

On the midpoint grid the problem is

    max  sum_i u(q_i + c_i) - lam * q_i * r_i   over   0 <= q_0 <= ... <= q_{n-1}

with c_i the claim quantile and r_i = Q_rho(1 - t_i). The objective is
separable and strictly concave, so pool-adjacent-violators with exact block
solves gives the unique maximizer. Flat blocks are where the slack H is
positive; elsewhere q_i is the pointwise maximizer.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from preferences import ClaimLike, UtilityModel, claim_values, lagrangian_objective
from quantile_core import Grid, QuantileFunction, pair_reversed
from solver_errors import IllPosedProblemError, NumericalFailureError

logger = logging.getLogger(__name__)

MAX_BRACKET_DOUBLINGS = 60
DEFAULT_BUDGET_TOL = 1e-8
# absolute floor of the budget tolerance for wealth near 0
BUDGET_ABS_TOL = 1e-14
LOG_LAMBDA_XTOL = 1e-14


@dataclass
class _Block:
    """Run of consecutive nodes sharing one value."""

    start: int
    end: int
    value: float

    def merge_with(self, other: "_Block") -> None:
        self.start = min(self.start, other.start)
        self.end = max(self.end, other.end)


@dataclass(eq=False)
class LagrangianSolution:
    """Maximizer of the Lagrangian problem for one multiplier."""

    lam: float
    qbar: QuantileFunction
    claim: NDArray[np.float64]
    kernel_reversed: NDArray[np.float64]
    marginal: NDArray[np.float64]
    Lambda: NDArray[np.float64]
    H: NDArray[np.float64]
    H0: float
    V_lambda: float
    pointwise: NDArray[np.float64]
    merges: int = 0
    utility: Optional[UtilityModel] = None

    @property
    def grid(self) -> Grid:
        return self.qbar.grid

    def budget(self) -> float:
        return float(np.mean(self.qbar.values * self.kernel_reversed))


@dataclass(eq=False)
class RobustSolution:
    """Calibrated optimum for initial wealth x."""

    x: float
    lam_star: float
    qbar: QuantileFunction
    V0: float
    V_lambda: float
    budget_residual: float
    wellposed_report: Optional[Dict[str, Any]] = None
    lagrangian: Optional[LagrangianSolution] = field(default=None, repr=False)


def _pava(
    pointwise: NDArray[np.float64],
    claim: NDArray[np.float64],
    cost: NDArray[np.float64],
    utility: UtilityModel,
    order: str,
):
    """
    Pool adjacent violators with exact block re-solves; cost = lam * r.

    Only a strict decrease is a violation: equal neighbours (runs of floored
    zeros in particular) stay separate blocks and are not counted as merges.
    """
    n = pointwise.size
    cost_prefix = np.concatenate([[0.0], np.cumsum(cost)])

    def block_value(start: int, end: int) -> float:
        level = cost_prefix[end] - cost_prefix[start]
        return utility.block_root(claim[start:end], level)

    def merged(a: _Block, b: _Block) -> _Block:
        block = _Block(a.start, a.end, a.value)
        block.merge_with(b)
        block.value = block_value(block.start, block.end)
        return block

    stack: List[_Block] = []
    merges = 0
    if order == "forward":
        for i in range(n):
            current = _Block(i, i + 1, float(pointwise[i]))
            while stack and stack[-1].value > current.value:
                current = merged(stack.pop(), current)
                merges += 1
            stack.append(current)
    elif order == "backward":
        for i in range(n - 1, -1, -1):
            current = _Block(i, i + 1, float(pointwise[i]))
            while stack and current.value > stack[-1].value:
                current = merged(current, stack.pop())
                merges += 1
            stack.append(current)
        stack.reverse()
    else:
        raise ValueError(f"Merge order must be 'forward' or 'backward', got '{order}'")

    values = np.empty(n)
    for block in stack:
        values[block.start:block.end] = block.value
    return values, merges


def solve_lagrangian(
    lam: float,
    claim: ClaimLike,
    utility: UtilityModel,
    kernel_q: QuantileFunction,
    grid: Optional[Grid] = None,
    order: str = "forward",
    wellposed_report: Optional[Dict[str, Any]] = None,
) -> LagrangianSolution:
    """
    Maximize the discrete Lagrangian objective over nonnegative increasing
    quantiles and assemble the dual function Lambda and the slack H.
    """
    if not np.isfinite(lam) or lam <= 0.0:
        raise ValueError(f"Multiplier must be positive and finite, got {lam}")
    if wellposed_report is not None and not wellposed_report.get("finitecon1", True):
        raise IllPosedProblemError(f"Lagrangian problem is ill-posed at lambda={lam}", wellposed_report)
    grid = grid or kernel_q.grid
    if kernel_q.grid != grid:
        raise ValueError(f"Grid mismatch: {kernel_q.grid.n} vs {grid.n} nodes")

    theta = claim_values(claim, grid)
    if np.any(theta < utility.domain_low):
        raise ValueError(f"Claim quantile drops below the utility domain bound {utility.domain_low}")
    rho_hat = kernel_q.reversed_values()
    cost = lam * rho_hat

    with np.errstate(divide="ignore"):
        pointwise = np.maximum(0.0, utility.inverse_marginal(cost) - theta)
    values, merges = _pava(pointwise, theta, cost, utility, order)
    logger.debug("lambda=%.6g: %d merges over %d nodes", lam, merges, grid.n)

    n = grid.n
    marginal = utility.du(values + theta)
    with np.errstate(invalid="ignore"):
        Lambda = np.cumsum(marginal[::-1])[::-1] / n
        slack = (cost - marginal) / n
        tail = np.cumsum(slack[::-1])[::-1]
    H = np.append(tail[1:], 0.0)
    H0 = float(tail[0])

    qbar = QuantileFunction(grid, values, value_at_0=0.0 if values[0] == 0.0 else None,
                            nonnegative=True)
    return LagrangianSolution(
        lam=float(lam),
        qbar=qbar,
        claim=theta,
        kernel_reversed=rho_hat,
        marginal=marginal,
        Lambda=Lambda,
        H=H,
        H0=H0,
        V_lambda=lagrangian_objective(qbar, lam, claim, utility, kernel_q),
        pointwise=pointwise,
        merges=merges,
        utility=utility,
    )


def _random_candidates(sol: LagrangianSolution, count: int, rng: np.random.Generator) -> NDArray:
    """Random nonnegative increasing vectors on the scale of the solution."""
    n = sol.grid.n
    scale = max(1.0, float(sol.qbar.values[-1]))
    steps = rng.exponential(size=(count, n)) * (rng.random((count, n)) < rng.random((count, 1)))
    paths = np.cumsum(steps, axis=1)
    top = np.maximum(paths[:, -1:], 1e-300)
    levels = rng.uniform(0.0, 2.0 * scale, size=(count, 1))
    return paths / top * levels


def verify_complementarity(
    sol: LagrangianSolution,
    tol: Optional[float] = None,
    n_random: int = 100,
    seed: int = 0,
    strict: bool = False,
) -> Dict[str, Any]:
    """
    Check the discrete optimality system of a Lagrangian solution.

    Checks: H >= -tol; H(0) reduced by the slack of the current Qbar ends at
    H(1) = 0; complementarity between the increments of Qbar and H; the
    floor at the first node when H(0) > 0; Lambda(1-) = 0 and the initial
    slope of Lambda against u'(Qbar(0+) + claim(0+)); and the directional
    inequality against random candidate quantiles. Marginals are re-evaluated
    from the stored utility, so an edited Qbar is judged against the stored
    duals. Violations are listed with node and magnitude.
    """
    n = sol.grid.n
    tol = 2.0 / n if tol is None else tol
    q = sol.qbar.values
    violations: List[Dict[str, Any]] = []

    def flag(check: str, node: int, magnitude: float) -> None:
        violations.append({"check": check, "node": int(node), "magnitude": float(magnitude)})

    finite_H = np.where(np.isfinite(sol.H), sol.H, 0.0)
    for i in np.flatnonzero(finite_H < -tol):
        flag("H_nonnegative", i, finite_H[i])
    if np.isfinite(sol.H0) and sol.H0 < -tol:
        flag("H_nonnegative", -1, sol.H0)
    # H(0) carried down the current quantile must land on H(1) = 0
    if sol.utility is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            fresh_marginal = sol.utility.du(q + sol.claim)
    else:
        fresh_marginal = sol.marginal
    if np.isfinite(sol.H0) and np.all(np.isfinite(fresh_marginal)):
        H_end = sol.H0 - float(np.sum(sol.lam * sol.kernel_reversed - fresh_marginal)) / n
        if abs(H_end) > tol:
            flag("H_terminal", n - 1, H_end)

    gaps = np.minimum(np.diff(q), sol.H[:-1])
    for i in np.flatnonzero(np.abs(gaps) > tol):
        flag("complementarity", i, gaps[i])
    if sol.H0 > tol and q[0] > tol:
        flag("floor", 0, q[0])

    if np.isfinite(sol.Lambda[0]) and sol.Lambda[-1] > tol * max(1.0, sol.Lambda[0]):
        flag("Lambda_terminal", n - 1, sol.Lambda[-1])
    if q[0] > tol and np.isfinite(fresh_marginal[0]) and np.isfinite(sol.Lambda[0]):
        # -Lambda'(0+) from the dual against u'(Qbar(0+) + claim(0+))
        edge = n * (sol.Lambda[0] - sol.Lambda[1])
        target = float(fresh_marginal[0])
        if abs(edge - target) > tol * max(1.0, target):
            flag("Lambda_initial_slope", 0, edge - target)

    rng = np.random.default_rng(seed)
    gradient = sol.marginal - sol.lam * sol.kernel_reversed
    directional = 0.0
    if np.all(np.isfinite(gradient)) and n_random > 0:
        candidates = _random_candidates(sol, n_random, rng)
        slopes = (candidates - q) @ gradient / n
        directional = float(slopes.max())
        if directional > tol:
            flag("directional", int(np.argmax(slopes)), directional)

    report = {
        "passed": not violations,
        "tolerance": tol,
        "violations": violations,
        "min_H": float(np.min(finite_H)),
        "max_complementarity": float(np.max(np.abs(gaps))) if gaps.size else 0.0,
        "directional_max": directional,
    }
    if strict and violations:
        first = violations[0]
        raise NumericalFailureError(
            f"Optimality check '{first['check']}' failed at node {first['node']} "
            f"(magnitude {first['magnitude']:.3e})",
            report,
        )
    return report


def calibrate(
    x: float,
    claim: ClaimLike,
    utility: UtilityModel,
    kernel_q: QuantileFunction,
    grid: Optional[Grid] = None,
    budget_tol: float = DEFAULT_BUDGET_TOL,
    wellposed_report: Optional[Dict[str, Any]] = None,
) -> RobustSolution:
    """
    Find the multiplier whose Lagrangian maximizer spends exactly x.

    The budget is non-increasing in lam, so the root is bracketed by
    doubling lam = 2^{+-k} and then located with brentq on log(lam).
    """
    if not np.isfinite(x) or x <= 0.0:
        raise ValueError(f"Initial wealth must be positive, got {x}")
    if wellposed_report is not None and not wellposed_report.get("statement5", True):
        raise IllPosedProblemError("No multiplier makes the problem well-posed", wellposed_report)
    grid = grid or kernel_q.grid
    cache: Dict[float, LagrangianSolution] = {}

    def solve(log_lam: float) -> LagrangianSolution:
        if log_lam not in cache:
            cache[log_lam] = solve_lagrangian(np.exp(log_lam), claim, utility, kernel_q, grid)
        return cache[log_lam]

    def excess(log_lam: float) -> float:
        return solve(log_lam).budget() - x

    lo = hi = 0.0
    f_lo = f_hi = excess(0.0)
    k = 0
    while f_lo < 0.0 and k < MAX_BRACKET_DOUBLINGS:
        k += 1
        hi, f_hi = lo, f_lo
        lo = -k * np.log(2.0)
        f_lo = excess(lo)
    k = 0
    while f_hi > 0.0 and k < MAX_BRACKET_DOUBLINGS:
        k += 1
        lo, f_lo = hi, f_hi
        hi = k * np.log(2.0)
        f_hi = excess(hi)
    if f_lo < 0.0 or f_hi > 0.0:
        raise IllPosedProblemError(
            "No Lagrange multiplier found",
            {"x": x, "lambda_range": [float(np.exp(lo)), float(np.exp(hi))],
             "budget_range": [f_lo + x, f_hi + x]},
        )
    logger.debug("Multiplier bracket [%.6g, %.6g] after %d doublings", np.exp(lo), np.exp(hi), k)

    if f_lo == 0.0:
        log_star = lo
    elif f_hi == 0.0:
        log_star = hi
    else:
        log_star = brentq(excess, lo, hi, xtol=LOG_LAMBDA_XTOL, rtol=4 * np.finfo(float).eps,
                          maxiter=500)
    sol = solve(log_star)
    residual = sol.budget() - x
    allowed = max(budget_tol * x, BUDGET_ABS_TOL)
    if abs(residual) > allowed:
        raise NumericalFailureError(
            f"Budget residual {residual:.3e} exceeds tolerance {allowed:.3e}",
            {"lambda": sol.lam, "residual": residual, "x": x},
        )
    logger.info("Calibrated lambda*=%.10g for x=%g (residual %.2e)", sol.lam, x, residual)
    return RobustSolution(
        x=float(x),
        lam_star=sol.lam,
        qbar=sol.qbar,
        V0=sol.V_lambda + sol.lam * x,
        V_lambda=sol.V_lambda,
        budget_residual=float(residual),
        wellposed_report=wellposed_report,
        lagrangian=sol,
    )
