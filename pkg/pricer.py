#!/usr/bin/env python3
"""
Classical and robust value functions and the utility-indifference price.

The buyer's price p of the intractable claim solves V_EU(x) = V0(x - p):
paying p and receiving the claim is as good as keeping x. V0 is strictly
increasing, so p is found by a bracketed root search on p -> V0(x - p).
"""

import logging
import threading
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from market_model import KernelLaw, kernel_quantile
from preferences import ClaimSpec, UtilityModel, claim_values, validate_pairing
from quantile_core import Grid, QuantileFunction
from solver_errors import IllPosedProblemError
from vi_solver import DEFAULT_BUDGET_TOL, calibrate

logger = logging.getLogger(__name__)

DEFAULT_PRICE_TOL = 1e-8
MAX_PRICE_EXPANSIONS = 40
# wealth left after paying, relative to x, below which V0 is read at 0
BOUNDARY_WEALTH = 1e-12
DEFAULT_CACHE_SIZE = 4096
ZERO_CLAIM = ClaimSpec.constant(0.0)


@dataclass
class PriceResult:
    """Indifference price with both sides of the defining equation."""

    p: Optional[float]
    V_EU_at_x: float
    V0_at_x_minus_p: Optional[float]
    residual: Optional[float]
    exists: bool
    status: str
    reason: str = ""

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _kernel(law: Union[KernelLaw, QuantileFunction], grid: Optional[Grid]) -> QuantileFunction:
    if isinstance(law, QuantileFunction):
        return law
    return kernel_quantile(law, grid or Grid())


class ValueFunctionCache:
    """
    V0(x) memoized per (claim, utility, kernel quantile, tolerance, wealth).

    Readers never block each other; insertion takes a lock. At most maxsize
    entries are kept, the oldest insertion is evicted first.
    """

    def __init__(self, maxsize: int = DEFAULT_CACHE_SIZE):
        if maxsize < 1:
            raise ValueError(f"Cache size must be positive, got {maxsize}")
        self.maxsize = maxsize
        self._values: Dict[Tuple, float] = {}
        self._lock = threading.Lock()

    def get(self, key: Tuple) -> Optional[float]:
        return self._values.get(key)

    def put(self, key: Tuple, value: float) -> None:
        with self._lock:
            if key in self._values:
                return
            while len(self._values) >= self.maxsize:
                self._values.pop(next(iter(self._values)))
            self._values[key] = value

    def __len__(self) -> int:
        return len(self._values)


_DEFAULT_CACHE = ValueFunctionCache()


def robust_value(
    x: float,
    claim: ClaimSpec,
    utility: UtilityModel,
    law: Union[KernelLaw, QuantileFunction],
    grid: Optional[Grid] = None,
    budget_tol: float = DEFAULT_BUDGET_TOL,
    cache: Optional[ValueFunctionCache] = _DEFAULT_CACHE,
) -> float:
    """
    V0(x) on the grid: E[u(claim)] at x = 0, -inf for negative wealth,
    otherwise the calibrated optimum.
    """
    kernel_q = _kernel(law, grid)
    if x < 0.0:
        return float("-inf")
    key = (claim, utility, hash(kernel_q.values.tobytes()), budget_tol, float(x))
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return cached
    if x == 0.0:
        value = float(np.mean(utility.u(claim_values(claim, kernel_q.grid))))
    else:
        value = calibrate(x, claim, utility, kernel_q, budget_tol=budget_tol).V0
    if cache is not None:
        cache.put(key, value)
    return value


def classical_value(
    x: float,
    utility: UtilityModel,
    law: Union[KernelLaw, QuantileFunction],
    grid: Optional[Grid] = None,
    budget_tol: float = DEFAULT_BUDGET_TOL,
) -> float:
    """Expected-utility value without the claim: the robust value of a zero claim."""
    return robust_value(x, ZERO_CLAIM, utility, law, grid, budget_tol)


def value_curve(
    wealths: Sequence[float],
    claim: ClaimSpec,
    utility: UtilityModel,
    law: Union[KernelLaw, QuantileFunction],
    grid: Optional[Grid] = None,
) -> pd.DataFrame:
    """Table of x, V0(x) and the calibrated multiplier over a wealth grid."""
    kernel_q = _kernel(law, grid)
    rows = []
    for x in wealths:
        sol = calibrate(float(x), claim, utility, kernel_q)
        rows.append({"x": float(x), "V0": sol.V0, "lambda": sol.lam_star})
    return pd.DataFrame(rows, columns=["x", "V0", "lambda"])


def indifference_price(
    x: float,
    claim: ClaimSpec,
    utility: UtilityModel,
    law: Union[KernelLaw, QuantileFunction],
    grid: Optional[Grid] = None,
    price_tol: float = DEFAULT_PRICE_TOL,
    budget_tol: float = DEFAULT_BUDGET_TOL,
) -> PriceResult:
    """
    Solve V_EU(x) = V0(x - p) for the buyer's price p <= x.

    A price exists iff V_EU(x) >= E[u(claim)] = V0(0). When V_EU(x) is within
    price_tol of E[u(claim)], or the root leaves less than BOUNDARY_WEALTH * x
    after paying, p = x is reported with status 'boundary'. A claim worth
    nothing more than cash gives exactly p = 0 with status 'zero'.
    """
    if not np.isfinite(x) or x <= 0.0:
        raise ValueError(f"Initial wealth must be positive, got {x}")
    validate_pairing(utility, claim)
    kernel_q = _kernel(law, grid)

    floor_wealth = BOUNDARY_WEALTH * x

    def robust(w: float) -> float:
        if w <= floor_wealth:
            w = 0.0
        return robust_value(w, claim, utility, kernel_q, budget_tol=budget_tol)

    v_eu = classical_value(x, utility, kernel_q, budget_tol=budget_tol)
    v_floor = robust(0.0)
    if v_eu < v_floor:
        return PriceResult(None, v_eu, v_floor, None, False, "no_price",
                           f"V_EU(x)={v_eu:.12g} is below E[u(claim)]={v_floor:.12g}")
    if v_eu - v_floor <= price_tol * abs(v_eu):
        return PriceResult(x, v_eu, v_floor, v_floor - v_eu, True, "boundary",
                           "all wealth is spent on the claim")

    v_full = robust(x)
    if v_full == v_eu:
        return PriceResult(0.0, v_eu, v_full, 0.0, True, "zero")

    def gap(p: float) -> float:
        return robust(x - p) - v_eu

    lo, f_lo = 0.0, v_full - v_eu
    k = 0
    while f_lo < 0.0 and k < MAX_PRICE_EXPANSIONS:
        k += 1
        lo = -x * (2.0 ** k - 1.0)
        f_lo = gap(lo)
    if f_lo < 0.0:
        raise IllPosedProblemError(
            "Indifference price bracket expansion capped",
            {"x": x, "lowest_price_tried": lo, "gap": f_lo},
        )
    logger.debug("Price bracket [%.6g, %.6g] after %d expansions", lo, x, k)

    p = brentq(gap, lo, x, xtol=1e-13 * max(1.0, x), rtol=4 * np.finfo(float).eps, maxiter=200)
    v_after = robust(x - p)
    residual = v_after - v_eu
    if x - p <= floor_wealth:
        return PriceResult(x, v_eu, v_after, float(residual), True, "boundary",
                           "all wealth is spent on the claim")
    if abs(residual) > price_tol * abs(v_eu):
        logger.warning("Price residual %.3e exceeds tolerance %.3e", residual, price_tol * abs(v_eu))
    logger.info("Indifference price p=%.10g for x=%g", p, x)
    return PriceResult(float(p), v_eu, v_after, float(residual), True, "interior")
