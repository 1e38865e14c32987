#!/usr/bin/env python3
"""
Problem configuration: JSON file -> validated domain objects.

The file layout is described by config_schema.json next to this module.
Structural problems (unknown keys, wrong types, missing sections) and
invalid values both surface as ConfigError.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from jsonschema import Draft7Validator
from jsonschema.exceptions import best_match

from market_model import KernelLaw, MarketSpec, PiecewiseConstant, kernel_law
from preferences import ClaimSpec, UtilityModel, validate_pairing
from quantile_core import DEFAULT_GRID_SIZE, Grid
from solver_errors import ConfigError
from vi_solver import DEFAULT_BUDGET_TOL

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("config_schema.json")


@dataclass
class SimulationSettings:
    n_paths: int = 2000
    n_steps: int = 256
    n_saved_paths: int = 20
    n_workers: int = 1


@dataclass
class ProblemConfig:
    """Everything one CLI command needs."""

    utility: UtilityModel
    claim: ClaimSpec
    wealth: float
    grid: Grid
    law: KernelLaw
    market: Optional[MarketSpec] = None
    seed: int = 0
    budget_tol: float = DEFAULT_BUDGET_TOL
    price_tol: float = 1e-8
    complementarity_tol: Optional[float] = None
    simulation: SimulationSettings = field(default_factory=SimulationSettings)


def check_schema(data: Any, schema: Dict[str, Any]) -> None:
    """Raise ConfigError naming the first schema violation, deepest path first."""
    validator = Draft7Validator(schema)
    error = best_match(validator.iter_errors(data))
    if error is not None:
        where = ".".join(["config", *(str(part) for part in error.absolute_path)])
        raise ConfigError(f"{where}: {error.message}")


def _pieces(spec: Union[float, list, dict], horizon: float, rank: int) -> PiecewiseConstant:
    """Scalar/array shorthand for a constant, or {breaks, values}."""
    if isinstance(spec, dict):
        if set(spec) != {"breaks", "values"}:
            raise ConfigError(f"Piecewise coefficient needs exactly 'breaks' and 'values', got {sorted(spec)}")
        return PiecewiseConstant(np.asarray(spec["breaks"], dtype=float),
                                 np.asarray(spec["values"], dtype=float))
    value = np.asarray(spec, dtype=float)
    while value.ndim < rank:
        value = value[np.newaxis, ...] if value.ndim else value.reshape((1,) * rank)
    return PiecewiseConstant.constant(horizon, value)


def _market(section: Dict[str, Any]) -> MarketSpec:
    horizon = float(section["T"])
    rate = _pieces(section["r"], horizon, 0)
    theta = _pieces(section["theta"], horizon, 1)
    n_assets = theta.values.shape[1]
    sigma = _pieces(section.get("sigma", np.eye(n_assets).tolist()), horizon, 2)
    return MarketSpec(horizon, rate, theta, sigma)


def _utility(section: Dict[str, Any]) -> UtilityModel:
    kind = section["kind"]
    if kind == "exponential":
        return UtilityModel.exponential(section.get("alpha", 1.0))
    if kind == "power":
        return UtilityModel.power(section.get("gamma", 0.5), section.get("shift", 0.0))
    return UtilityModel.logarithmic(section.get("shift", 0.0))


def _claim(section: Dict[str, Any]) -> ClaimSpec:
    kind = section["kind"]
    if kind == "constant":
        return ClaimSpec.constant(section.get("value", 0.0))
    if kind == "atoms":
        if "values" not in section:
            raise ConfigError("Atom claim needs 'values'")
        return ClaimSpec.atoms(section["values"], section.get("probs"))
    if kind == "uniform":
        return ClaimSpec.uniform(section.get("low", 0.0), section.get("high", 1.0))
    return ClaimSpec.shifted_lognormal(section.get("mu", 0.0), section.get("sigma", 1.0),
                                       section.get("shift", 0.0))


def parse_config(
    data: Dict[str, Any],
    grid: Optional[int] = None,
    seed: Optional[int] = None,
    tol: Optional[float] = None,
) -> ProblemConfig:
    """Build a ProblemConfig from parsed JSON; keyword arguments override the file."""
    schema = json.loads(SCHEMA_PATH.read_text())
    check_schema(data, schema)
    if ("market" in data) == ("kernel" in data):
        raise ConfigError("config: exactly one of 'market' or 'kernel' must be given")

    tolerances = data.get("tolerances", {})
    try:
        market = _market(data["market"]) if "market" in data else None
        law = kernel_law(market) if market is not None else KernelLaw(data["kernel"]["m"], data["kernel"]["s"])
        utility = _utility(data["utility"])
        claim = _claim(data["claim"])
        validate_pairing(utility, claim)
        wealth = float(data["wealth"])
        if wealth <= 0.0:
            raise ValueError(f"Initial wealth must be positive, got {wealth}")
        config = ProblemConfig(
            utility=utility,
            claim=claim,
            wealth=wealth,
            grid=Grid(grid if grid is not None else data.get("grid", DEFAULT_GRID_SIZE)),
            law=law,
            market=market,
            seed=int(seed if seed is not None else data.get("seed", 0)),
            budget_tol=float(tol if tol is not None else tolerances.get("budget", DEFAULT_BUDGET_TOL)),
            price_tol=float(tolerances.get("price", 1e-8)),
            complementarity_tol=tolerances.get("complementarity"),
            simulation=SimulationSettings(**data.get("simulation", {})),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"config: {exc}") from exc
    logger.debug("Loaded config: %s", config)
    return config


def load_config(path: Union[str, Path], **overrides) -> ProblemConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config {path} is not valid JSON: {exc}") from exc
    return parse_config(data, **overrides)
