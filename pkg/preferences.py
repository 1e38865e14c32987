#!/usr/bin/env python3
"""
Utilities, intractable claims and the robust objective.

The worst coupling of wealth X with a claim of known law is the comonotonic
one, so the robust objective of a wealth quantile Q_X is the midpoint sum of
u(Q_X + Q_claim). This module also holds the well-posedness checks run
before solving.
"""

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate
from scipy.optimize import brentq
from scipy.special import logsumexp
from scipy.stats import norm

from market_model import KernelLaw
from quantile_core import Grid, QuantileFunction, atom_table, from_ppf, right_inverse
from solver_errors import NumericalFailureError

logger = logging.getLogger(__name__)

BLOCK_XTOL = 1e-12
BLOCK_MAXITER = 200
MAX_COUPLING_ATOMS = 8

# Tail windows for the divergence sentinel: z_k = Phi^{-1}(1 - 2^-k)
TAIL_WINDOWS = 60
TAIL_CAUCHY_TOL = 1e-8
LOGNORMAL_SCORE_WINDOW = float(norm.isf(1e-16))
# tail ratio at the smallest t must be at most this share of the first one
TAIL_DECAY_FACTOR = 0.75
_LEGENDRE_NODES, _LEGENDRE_WEIGHTS = np.polynomial.legendre.leggauss(32)


@dataclass(frozen=True)
class UtilityModel:
    """
    Concave utility with its derivatives and marginal-utility inverse.

    kind is 'exponential' (u = -exp(-alpha x)), 'power'
    (u = (x + shift)^gamma / gamma, 0 < gamma < 1) or 'log'
    (u = ln(x + shift)).
    """

    kind: str
    alpha: float = 1.0
    gamma: float = 0.5
    shift: float = 0.0

    def __post_init__(self):
        if self.kind == "exponential":
            if not np.isfinite(self.alpha) or self.alpha <= 0.0:
                raise ValueError(f"Risk aversion alpha must be positive, got {self.alpha}")
        elif self.kind == "power":
            if not 0.0 < self.gamma < 1.0:
                raise ValueError(f"Power exponent gamma must lie in (0, 1), got {self.gamma}")
        elif self.kind != "log":
            raise ValueError(f"Unknown utility kind '{self.kind}'")
        if not np.isfinite(self.shift):
            raise ValueError(f"Utility shift must be finite, got {self.shift}")

    @classmethod
    def exponential(cls, alpha: float = 1.0) -> "UtilityModel":
        return cls("exponential", alpha=alpha)

    @classmethod
    def power(cls, gamma: float, shift: float = 0.0) -> "UtilityModel":
        return cls("power", gamma=gamma, shift=shift)

    @classmethod
    def logarithmic(cls, shift: float = 0.0) -> "UtilityModel":
        return cls("log", shift=shift)

    @property
    def domain_low(self) -> float:
        return -np.inf if self.kind == "exponential" else -self.shift

    def admits(self, lower: float) -> bool:
        """True when u is finite and continuous on [lower, infinity)."""
        if lower > self.domain_low:
            return True
        return lower == self.domain_low and self.kind == "power"

    def u(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            if self.kind == "exponential":
                return -np.exp(-self.alpha * x)
            if self.kind == "power":
                return (x + self.shift) ** self.gamma / self.gamma
            return np.log(x + self.shift)

    def du(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            if self.kind == "exponential":
                return self.alpha * np.exp(-self.alpha * x)
            if self.kind == "power":
                return (x + self.shift) ** (self.gamma - 1.0)
            return 1.0 / (x + self.shift)

    def d2u(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            if self.kind == "exponential":
                return -self.alpha ** 2 * np.exp(-self.alpha * x)
            if self.kind == "power":
                return (self.gamma - 1.0) * (x + self.shift) ** (self.gamma - 2.0)
            return -1.0 / (x + self.shift) ** 2

    def inverse_marginal(self, y: ArrayLike) -> NDArray[np.float64]:
        """(u')^{-1}(y) for y > 0."""
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            if self.kind == "exponential":
                return (np.log(self.alpha) - np.log(y)) / self.alpha
            if self.kind == "power":
                return y ** (1.0 / (self.gamma - 1.0)) - self.shift
            return 1.0 / y - self.shift

    def block_root(self, offsets: NDArray[np.float64], level: float) -> float:
        """
        Largest q >= 0 solving sum_i u'(q + offsets_i) = level, or 0 when the
        left side is already below level at q = 0.
        """
        if self.kind == "exponential":
            log_mass = logsumexp(-self.alpha * offsets)
            root = (np.log(self.alpha) + log_mass - np.log(level)) / self.alpha
            return max(0.0, float(root))

        def excess(q: float) -> float:
            return float(np.sum(self.du(q + offsets))) - level

        centre = float(self.inverse_marginal(level / offsets.size))
        hi = centre - float(offsets.min())
        if hi <= 0.0:
            return 0.0
        lo = max(0.0, centre - float(offsets.max()))
        if excess(hi) >= 0.0:
            return hi
        f_lo = excess(lo)
        if f_lo <= 0.0:
            return lo
        # u' can be infinite at the domain edge; step inside until finite
        while not np.isfinite(f_lo):
            lo = lo + 1e-12 * max(1.0, hi) if lo == 0.0 else lo + 0.5 * (hi - lo)
            f_lo = excess(lo)
            if f_lo <= 0.0:
                return lo

        root, info = brentq(excess, lo, hi, xtol=BLOCK_XTOL, maxiter=BLOCK_MAXITER,
                            full_output=True, disp=False)
        if not info.converged:
            raise NumericalFailureError(
                "Block first-order condition did not converge",
                {"iterations": info.iterations, "bracket": [lo, hi], "size": int(offsets.size)},
            )
        return float(root)

    def inverse_error(self, points: Optional[ArrayLike] = None) -> float:
        """Largest |(u')^{-1}(u'(z)) - z| over test points."""
        if points is None:
            base = 0.0 if self.kind == "exponential" else self.domain_low
            points = base + np.geomspace(1e-2, 1e2, 41)
        points = np.asarray(points, dtype=float)
        return float(np.max(np.abs(self.inverse_marginal(self.du(points)) - points)))


@dataclass(frozen=True)
class ClaimSpec:
    """
    Law of the intractable claim.

    kind 'atoms' uses values/probs, 'uniform' uses low/high and
    'shifted_lognormal' is shift + exp(mu + sigma Z).
    """

    kind: str
    values: Tuple[float, ...] = ()
    probs: Tuple[float, ...] = ()
    low: float = 0.0
    high: float = 1.0
    mu: float = 0.0
    sigma: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind == "atoms":
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
            object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
            atom_table(self.values, self.probs)
        elif self.kind == "uniform":
            if not (np.isfinite(self.low) and np.isfinite(self.high)) or self.low >= self.high:
                raise ValueError(f"Uniform claim needs finite low < high, got ({self.low}, {self.high})")
        elif self.kind == "shifted_lognormal":
            if not np.isfinite(self.shift):
                raise ValueError("Lognormal claim shift (essential infimum) must be finite")
            if not np.isfinite(self.mu) or not (np.isfinite(self.sigma) and self.sigma > 0.0):
                raise ValueError(f"Lognormal claim needs finite mu and sigma > 0, got ({self.mu}, {self.sigma})")
        else:
            raise ValueError(f"Unknown claim kind '{self.kind}'")

    @classmethod
    def constant(cls, value: float) -> "ClaimSpec":
        return cls("atoms", values=(value,), probs=(1.0,))

    @classmethod
    def atoms(cls, values: Sequence[float], probs: Optional[Sequence[float]] = None) -> "ClaimSpec":
        if probs is None:
            probs = [1.0 / len(values)] * len(values)
        return cls("atoms", values=tuple(values), probs=tuple(probs))

    @classmethod
    def uniform(cls, low: float, high: float) -> "ClaimSpec":
        return cls("uniform", low=low, high=high)

    @classmethod
    def shifted_lognormal(cls, mu: float, sigma: float, shift: float = 0.0) -> "ClaimSpec":
        return cls("shifted_lognormal", mu=mu, sigma=sigma, shift=shift)

    @property
    def ess_inf(self) -> float:
        if self.kind == "atoms":
            return float(atom_table(self.values, self.probs)[0][0])
        if self.kind == "uniform":
            return float(self.low)
        return float(self.shift)

    def is_degenerate(self) -> bool:
        return self.kind == "atoms" and atom_table(self.values, self.probs)[0].size == 1

    def ppf(self, u: ArrayLike) -> NDArray[np.float64]:
        u = np.asarray(u, dtype=float)
        if self.kind == "atoms":
            return right_inverse(*atom_table(self.values, self.probs), u)
        if self.kind == "uniform":
            return self.low + (self.high - self.low) * u
        return self.shift + np.exp(self.mu + self.sigma * norm.ppf(u))

    def quantile(self, grid: Grid) -> QuantileFunction:
        return _claim_quantile(self, grid)

    def expectation(self, fn: Callable[[NDArray], NDArray]) -> float:
        """E[fn(claim)] by exact summation or adaptive quadrature."""
        if self.kind == "atoms":
            distinct, cumulative = atom_table(self.values, self.probs)
            mass = np.diff(np.concatenate([[0.0], cumulative]))
            return float(np.sum(mass * fn(distinct)))
        if self.kind == "uniform":
            value, _ = integrate.quad(lambda x: float(fn(x)), self.low, self.high, limit=200)
            return value / (self.high - self.low)
        # normal scores beyond the window carry less than 1e-16 of mass each side
        value, _ = integrate.quad(
            lambda z: float(fn(self.shift + np.exp(self.mu + self.sigma * z))) * norm.pdf(z),
            -LOGNORMAL_SCORE_WINDOW, LOGNORMAL_SCORE_WINDOW, points=[0.0], limit=200,
        )
        return value


@lru_cache(maxsize=64)
def _claim_quantile(claim: ClaimSpec, grid: Grid) -> QuantileFunction:
    upper = np.inf if claim.kind == "shifted_lognormal" else None
    if claim.kind == "uniform":
        upper = claim.high
    elif claim.kind == "atoms":
        upper = float(atom_table(claim.values, claim.probs)[0][-1])
    return from_ppf(claim.ppf, grid, value_at_0=claim.ess_inf, left_limit_at_1=upper)


ClaimLike = Union[ClaimSpec, QuantileFunction]


def claim_values(claim: ClaimLike, grid: Grid) -> NDArray[np.float64]:
    """Claim quantile at the grid nodes, from a spec or a ready quantile."""
    if isinstance(claim, QuantileFunction):
        if claim.grid != grid:
            raise ValueError(f"Grid mismatch: {claim.grid.n} vs {grid.n} nodes")
        return claim.values
    return claim.quantile(grid).values


def validate_pairing(utility: UtilityModel, claim: ClaimSpec) -> None:
    """The utility must be finite on [min(0, ess inf claim), inf) and E[u(claim)] finite."""
    lower = min(0.0, claim.ess_inf)
    if not utility.admits(lower):
        raise ValueError(
            f"Claim essential infimum {claim.ess_inf} falls outside the domain of the "
            f"{utility.kind} utility (domain starts at {utility.domain_low}); increase the shift"
        )
    expected = claim.expectation(utility.u)
    if not np.isfinite(expected):
        raise ValueError(f"E[u(claim)] is not finite ({expected})")


def _utility_argument(values: NDArray, utility: UtilityModel) -> NDArray:
    if np.any(values < utility.domain_low):
        bad = int(np.argmin(values))
        raise ValueError(
            f"Utility argument {values[bad]} at node {bad} lies below the domain "
            f"bound {utility.domain_low}"
        )
    return values


def robust_objective(q_x: QuantileFunction, claim: ClaimLike, utility: UtilityModel) -> float:
    """Worst-coupling expected utility: mean of u(Q_X(t_i) + Q_claim(t_i))."""
    total = _utility_argument(q_x.values + claim_values(claim, q_x.grid), utility)
    return float(np.mean(utility.u(total)))


def lagrangian_objective(
    q: QuantileFunction,
    lam: float,
    claim: ClaimLike,
    utility: UtilityModel,
    kernel_q: QuantileFunction,
) -> float:
    """Mean of u(Q + Q_claim) - lam * Q * Q_rho(1 - t)."""
    if lam <= 0.0:
        raise ValueError(f"Multiplier must be positive, got {lam}")
    if kernel_q.grid != q.grid:
        raise ValueError(f"Grid mismatch: {q.grid.n} vs {kernel_q.grid.n} nodes")
    total = _utility_argument(q.values + claim_values(claim, q.grid), utility)
    return float(np.mean(utility.u(total) - lam * q.values * kernel_q.reversed_values()))


def min_coupling_oracle(
    x_atoms: Sequence[float], y_atoms: Sequence[float], utility: UtilityModel
) -> Tuple[float, Tuple[int, ...]]:
    """
    Exhaustive minimum of mean u(x_i + y_perm(i)) over all permutations of
    equally weighted atoms. Inputs are sorted first and the returned
    permutation indexes the sorted y; among minimizers the first in
    lexicographic order is returned.
    """
    x = np.sort(np.asarray(x_atoms, dtype=float))
    y = np.sort(np.asarray(y_atoms, dtype=float))
    if x.size != y.size or x.size == 0:
        raise ValueError(f"Need two non-empty atom lists of equal length, got {x.size} and {y.size}")
    if x.size > MAX_COUPLING_ATOMS:
        raise ValueError(f"Too many atoms for enumeration: {x.size} > {MAX_COUPLING_ATOMS}")

    perms = np.array(list(itertools.permutations(range(x.size))))
    values = np.mean(utility.u(x + y[perms]), axis=1)
    best = float(values.min())
    tied = np.flatnonzero(values <= best + 1e-14 * max(1.0, abs(best)))
    return best, tuple(int(i) for i in perms[tied[0]])


def sandwich_constants(claim: ClaimSpec, utility: UtilityModel) -> Tuple[float, float]:
    """
    Constants with E[u(X)] - C1 <= J0(X) <= E[u(X)] + C2 for every
    nonnegative wealth X.
    """
    q0 = claim.ess_inf
    c1 = (abs(float(utility.u(1.0 + abs(q0))))
          + float(utility.du(1.0)) * abs(q0)
          + abs(float(utility.u(q0))))
    c2 = claim.expectation(lambda v: utility.u(np.maximum(v, 0.0))) - float(utility.u(0.0))
    return c1, c2


def _tail_windows() -> NDArray[np.float64]:
    """Window edges in normal-score space, expanding symmetrically."""
    return norm.isf(0.5 ** np.arange(2, TAIL_WINDOWS + 1))


def _lognormal_expectation(integrand: Callable[[NDArray], NDArray], law: KernelLaw) -> Tuple[float, bool]:
    """
    E[g(rho)] for log-normal rho over expanding normal-score windows.

    Returns the value and whether the window sums Cauchy-converge; a
    non-finite integrand or non-vanishing window contributions count as
    divergence.
    """
    edges = _tail_windows()

    def window(a: NDArray, b: NDArray) -> NDArray:
        mid, rad = 0.5 * (a + b), 0.5 * (b - a)
        z = mid[:, None] + rad[:, None] * _LEGENDRE_NODES
        with np.errstate(all="ignore"):
            g = integrand(np.exp(law.m + law.s * z)) * norm.pdf(z)
        return rad * (g @ _LEGENDRE_WEIGHTS)

    centre = window(np.array([-edges[0]]), np.array([edges[0]]))[0]
    upper = window(edges[:-1], edges[1:])
    lower = window(-edges[1:], -edges[:-1])
    pieces = upper + lower
    if not (np.isfinite(centre) and np.all(np.isfinite(pieces))):
        return float("nan"), False

    partial = centre + np.cumsum(pieces)
    total = float(partial[-1])
    scale = max(1.0, abs(total))
    converged = bool(np.all(np.abs(pieces[-3:]) <= TAIL_CAUCHY_TOL * scale))
    return total, converged


def _integrals_at(utility: UtilityModel, law: KernelLaw, lam: float) -> Dict[str, Any]:
    def payoff(rho):
        return utility.inverse_marginal(lam * rho)

    eu, eu_ok = _lognormal_expectation(lambda rho: utility.u(payoff(rho)), law)
    cost, cost_ok = _lognormal_expectation(lambda rho: rho * payoff(rho), law)
    dual, dual_ok = _lognormal_expectation(
        lambda rho: utility.u(payoff(rho)) - lam * rho * payoff(rho), law
    )
    return {
        "expected_utility": eu, "expected_utility_finite": eu_ok,
        "expected_cost": cost, "expected_cost_finite": cost_ok,
        "dual_value": dual, "dual_value_finite": dual_ok,
    }


def wellposedness_check(utility: UtilityModel, law: KernelLaw, lam: float = 1.0) -> Dict[str, Any]:
    """
    Finiteness verdicts for the unconstrained optimum (u')^{-1}(lam rho).

    statement5: both E[u(I(lam rho))] and E[rho I(lam rho)] are finite for
    some multiplier on the scan. finitecon1: E[u(I) - lam rho I] is finite at the
    given lam. lower_threshold_estimate: smallest scanned multiplier above
    which finitecon1 holds at every scanned value (0 when it holds at all of them).
    """
    if lam <= 0.0:
        raise ValueError(f"Multiplier must be positive, got {lam}")
    at_lam = _integrals_at(utility, law, lam)

    multipliers = 2.0 ** np.arange(-20, 21, 2)
    finite_at = []
    statement5 = at_lam["expected_utility_finite"] and at_lam["expected_cost_finite"]
    for candidate in multipliers:
        scan_integrals = _integrals_at(utility, law, float(candidate))
        finite_at.append(scan_integrals["dual_value_finite"])
        statement5 = statement5 or (
            scan_integrals["expected_utility_finite"] and scan_integrals["expected_cost_finite"]
        )

    finite_at = np.array(finite_at)
    if finite_at.all():
        threshold = 0.0
    elif not finite_at[-1]:
        threshold = float("inf")
    else:
        last_bad = int(np.flatnonzero(~finite_at)[-1])
        threshold = float(multipliers[last_bad + 1])

    report = {
        "lambda": float(lam),
        "statement5": bool(statement5),
        "finitecon1": bool(at_lam["dual_value_finite"]),
        "lower_threshold_estimate": threshold,
    }
    report.update(at_lam)
    logger.debug("Well-posedness at lambda=%g: %s", lam, report)
    return report


def assumption_a2_report(claim: ClaimSpec, utility: UtilityModel, law: KernelLaw) -> Dict[str, Any]:
    """
    Tail ratio u'(Q_claim(t)) / Q_rho(1 - t) for t = 2^-k, k = 4..20, and E[u'(claim)].

    The condition holds when the ratios never increase, the last one is at
    most TAIL_DECAY_FACTOR times the first, and E[u'(claim)] is finite.
    A finite u'(ess inf claim) is reported but does not decide the verdict.
    """
    tails = 0.5 ** np.arange(4, 21)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = utility.du(claim.ppf(tails)) / law.upper_ppf(tails)
    finite = bool(np.all(np.isfinite(ratios)))
    decaying = finite and bool(np.all(np.diff(ratios) <= 1e-12 * ratios[:-1]))
    shrunk = finite and bool(ratios[-1] <= TAIL_DECAY_FACTOR * ratios[0])
    edge_marginal = float(utility.du(claim.ess_inf))
    sufficient = bool(np.isfinite(edge_marginal))

    marginal_mean = claim.expectation(utility.du)
    integrable = bool(np.isfinite(marginal_mean))
    return {
        "tail_points": tails.tolist(),
        "tail_ratios": ratios.tolist(),
        "ratio_decaying": decaying,
        "ratio_shrunk": shrunk,
        "finite_marginal_at_ess_inf": sufficient,
        "expected_marginal_utility": marginal_mean,
        "expected_marginal_finite": integrable,
        "holds": bool(decaying and shrunk and integrable),
    }


def check_assumption_a2(claim: ClaimSpec, utility: UtilityModel, law: KernelLaw) -> bool:
    """Tail condition linking claim and kernel quantiles; True when it holds."""
    return assumption_a2_report(claim, utility, law)["holds"]
