#!/usr/bin/env python3
"""
Main script for the Robust Utility Solver
Command-line interface for optimal terminal wealth, envelope solutions,
indifference prices, replication backtests and well-posedness checks

Usage:
    python main.py solve --config configs/reference.json --out results/
    python main.py price --config configs/reference.json --out results/ --grid 1024

Exit codes: 0 success, 2 configuration error, 3 ill-posed problem
(no multiplier, no price), 4 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from exp_solver import concave_envelope, envelope_input, solve_exponential
from market_model import kernel_quantile
from portfolio import TerminalMap, replicate_and_verify
from preferences import assumption_a2_report, sandwich_constants, wellposedness_check
from pricer import indifference_price
from problem_config import ProblemConfig, load_config
from solver_errors import ConfigError, IllPosedProblemError, NumericalFailureError
from vi_solver import calibrate, verify_complementarity

logger = logging.getLogger("robust_eum")

COMMANDS = ("solve", "solve-exp", "price", "simulate", "check", "envelope")
LOG_LEVEL_ENV = "ROBUST_EUM_LOG_LEVEL"
EXIT_OK, EXIT_CONFIG, EXIT_ILL_POSED, EXIT_NUMERICAL = 0, 2, 3, 4


def _plain(value: Any) -> Any:
    """JSON-ready copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else str(value)
    return value


def write_json(payload: Dict[str, Any], path: Path) -> None:
    path.write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n")


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


class RobustUtilityApp:
    def __init__(self, config: ProblemConfig, out_dir: Path):
        self.config = config
        self.out_dir = out_dir
        self.kernel_q = kernel_quantile(config.law, config.grid)

    def show_banner(self, command: str):
        """Display run banner"""
        cfg = self.config
        print("=" * 70)
        print(f"📈 ROBUST UTILITY SOLVER - {command.upper()}")
        print("=" * 70)
        print(f"Utility: {cfg.utility.kind} | Claim: {cfg.claim.kind} | x = {cfg.wealth:g}")
        print(f"Kernel law: m = {cfg.law.m:.6f}, s = {cfg.law.s:.6f} | grid n = {cfg.grid.n}")
        print("-" * 70)

    def run(self, command: str) -> int:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.show_banner(command)
        handler = {
            "solve": self.run_solve,
            "solve-exp": self.run_solve_exp,
            "price": self.run_price,
            "simulate": self.run_simulate,
            "check": self.run_check,
            "envelope": self.run_envelope,
        }[command]
        handler()
        print(f"\n📁 Results written to {self.out_dir}")
        return EXIT_OK

    def _calibrated(self):
        cfg = self.config
        report = wellposedness_check(cfg.utility, cfg.law, 1.0)
        return calibrate(cfg.wealth, cfg.claim, cfg.utility, self.kernel_q,
                         budget_tol=cfg.budget_tol, wellposed_report=report)

    def _require_exponential(self):
        if self.config.utility.kind != "exponential":
            raise ConfigError(f"This command needs an exponential utility, got '{self.config.utility.kind}'")
        return self.config.utility.alpha

    def run_solve(self):
        """General solver: calibrated optimal quantile with H and Lambda"""
        sol = self._calibrated()
        lag = sol.lagrangian
        check = verify_complementarity(lag, tol=self.config.complementarity_tol)
        write_csv(pd.DataFrame({
            "t": self.config.grid.nodes,
            "Qbar": sol.qbar.values,
            "Lambda": lag.Lambda,
            "H": lag.H,
        }), self.out_dir / "solution.csv")
        summary = {
            "lambda": sol.lam_star,
            "V0": sol.V0,
            "V_lambda": sol.V_lambda,
            "budget_residual": sol.budget_residual,
            "x": sol.x,
            "grid": self.config.grid.n,
            "merges": lag.merges,
            "H0": lag.H0,
            "complementarity_passed": check["passed"],
            "complementarity_violations": len(check["violations"]),
            "wellposed": sol.wellposed_report,
        }
        write_json(summary, self.out_dir / "summary.json")
        self._display_solution(summary)

    def run_solve_exp(self):
        """Envelope route for exponential utility"""
        alpha = self._require_exponential()
        cfg = self.config
        result = solve_exponential(cfg.wealth, cfg.claim, alpha, cfg.law, cfg.grid)
        sol = result.solution
        write_csv(pd.DataFrame({
            "t": cfg.grid.nodes,
            "Qbar": sol.qbar.values,
            "delta_prime": result.delta_prime,
        }), self.out_dir / "exp_solution.csv")
        summary = {
            "lambda": sol.lam_star,
            "V0": sol.V0,
            "V_lambda": sol.V_lambda,
            "budget_residual": sol.budget_residual,
            "x": sol.x,
            "grid": cfg.grid.n,
            "hull_knots": int(result.envelope.hull_knots.size),
            "floor_binding": result.floor_binding,
            "degenerate_claim": result.degenerate_claim,
        }
        write_json(summary, self.out_dir / "summary.json")
        self._display_solution(summary)

    def run_envelope(self):
        """Weighting, envelope input and its concave envelope"""
        alpha = self._require_exponential()
        cfg = self.config
        z, f, w = envelope_input(cfg.claim, alpha, self.kernel_q, cfg.grid)
        env = concave_envelope(z, f)
        write_csv(pd.DataFrame({
            "z": env.z,
            "f": env.f,
            "delta": env.delta,
            "on_hull": env.on_hull.astype(int),
        }), self.out_dir / "envelope.csv")
        summary = {
            "normalizer": w.normalizer,
            "w_half": float(w(0.5)),
            "hull_knots": int(env.hull_knots.size),
            "max_gap": float(np.max(env.delta - env.f)),
            "grid": cfg.grid.n,
        }
        write_json(summary, self.out_dir / "summary.json")
        print(f"🔺 Hull knots: {summary['hull_knots']} of {z.size} points")
        print(f"   Largest envelope gap: {summary['max_gap']:.6e}")

    def run_price(self):
        """Utility-indifference price of the claim"""
        cfg = self.config
        result = indifference_price(cfg.wealth, cfg.claim, cfg.utility, self.kernel_q,
                                    price_tol=cfg.price_tol, budget_tol=cfg.budget_tol)
        write_json({
            "p": result.p,
            "V_EU": result.V_EU_at_x,
            "V0": result.V0_at_x_minus_p,
            "residual": result.residual,
            "exists": result.exists,
        }, self.out_dir / "price.json")
        write_json(result.to_dict(), self.out_dir / "summary.json")
        if not result.exists:
            raise IllPosedProblemError("No indifference price exists", result.to_dict())
        print(f"💰 Indifference price: p = {result.p:.10g} ({result.status})")
        print(f"   V_EU(x) = {result.V_EU_at_x:.10g}, V0(x - p) = {result.V0_at_x_minus_p:.10g}")

    def run_simulate(self):
        """Monte Carlo replication of the optimal payoff"""
        cfg = self.config
        if cfg.market is None:
            raise ConfigError("simulate needs a 'market' section, not a bare kernel law")
        sol = self._calibrated()
        sim = cfg.simulation
        report = replicate_and_verify(cfg.market, TerminalMap(sol.qbar, cfg.law, sol.x),
                                      sim.n_paths, sim.n_steps, cfg.seed,
                                      n_workers=sim.n_workers, keep_paths=True)
        paths, X = report.pop("paths"), report.pop("wealth_paths")
        keep = min(sim.n_saved_paths, paths.n_paths)
        n_times = paths.times.size
        write_csv(pd.DataFrame({
            "path_id": np.repeat(np.arange(keep), n_times),
            "t": np.tile(paths.times, keep),
            "varrho": paths.varrho[:keep].reshape(-1),
            "wealth": X[:keep].reshape(-1),
        }), self.out_dir / "paths.csv")
        report.update({"lambda": sol.lam_star, "V0": sol.V0})
        write_json(report, self.out_dir / "summary.json")
        self._display_replication(report)

    def run_check(self):
        """Well-posedness and tail-assumption report"""
        cfg = self.config
        wellposed = wellposedness_check(cfg.utility, cfg.law, 1.0)
        tail = assumption_a2_report(cfg.claim, cfg.utility, cfg.law)
        c1, c2 = sandwich_constants(cfg.claim, cfg.utility)
        report = {
            "statement5": wellposed["statement5"],
            "finitecon1": wellposed["finitecon1"],
            "lower_threshold_estimate": wellposed["lower_threshold_estimate"],
            "assumption_a2": tail["holds"],
            "expected_marginal_finite": tail["expected_marginal_finite"],
            "inverse_marginal_error": cfg.utility.inverse_error(),
            "sandwich_C1": c1,
            "sandwich_C2": c2,
        }
        write_json(report, self.out_dir / "check.json")
        write_json({"wellposed": wellposed, "assumption_a2": tail}, self.out_dir / "summary.json")
        self._display_check(report)

    def _display_solution(self, summary: Dict[str, Any]):
        print("\n📊 OPTIMAL SOLUTION")
        print(f"   λ*              : {summary['lambda']:.12g}")
        print(f"   V0(x)           : {summary['V0']:.12g}")
        print(f"   Budget residual : {summary['budget_residual']:.3e}")
        if "complementarity_passed" in summary:
            mark = "✅" if summary["complementarity_passed"] else "⚠️ "
            print(f"   {mark} Complementarity check "
                  f"({summary['complementarity_violations']} violations)")
        if summary.get("floor_binding"):
            print("   ⚠️  Nonnegativity floor binds; use the general solver")

    def _display_replication(self, report: Dict[str, Any]):
        print("\n🎲 REPLICATION BACKTEST")
        print(f"   Paths x steps      : {report['n_paths']} x {report['n_steps']}")
        print(f"   Terminal RMSE      : {report['terminal_rmse']:.6e} "
              f"({100 * report['relative_rmse']:.3f}% of E[X*])")
        print(f"   Max path error     : {report['pathwise_max_err']:.6e}")
        print(f"   Max martingale |z| : {report['max_martingale_z']:.2f}")

    def _display_check(self, report: Dict[str, Any]):
        print("\n🔍 WELL-POSEDNESS CHECK")
        for key in ("statement5", "finitecon1", "assumption_a2", "expected_marginal_finite"):
            print(f"   {'✅' if report[key] else '❌'} {key}")
        print(f"   λ threshold estimate: {report['lower_threshold_estimate']}")


def build_argument_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Robust expected-utility maximization with an intractable claim."
    )
    parser.add_argument("command", choices=COMMANDS, help="What to compute.")
    parser.add_argument("--config", required=True, help="Path to the JSON problem configuration.")
    parser.add_argument("--out", required=True, help="Output directory (created if missing).")
    parser.add_argument("--grid", type=int, default=None, help="Override the quantile grid size.")
    parser.add_argument("--seed", type=int, default=None, help="Override the simulation seed.")
    parser.add_argument("--tol", type=float, default=None, help="Override the budget tolerance.")
    return parser


def configure_logging() -> None:
    level_name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    for noisy in ("numexpr",):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_argument_parser().parse_args(argv)
    configure_logging()
    out_dir = Path(args.out)
    try:
        config = load_config(args.config, grid=args.grid, seed=args.seed, tol=args.tol)
        return RobustUtilityApp(config, out_dir).run(args.command)
    except ConfigError as exc:
        print(f"❌ Configuration error: {exc}")
        return EXIT_CONFIG
    except IllPosedProblemError as exc:
        print(f"❌ Ill-posed problem: {exc}")
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json({"error": str(exc), "report": exc.report}, out_dir / "report.json")
        return EXIT_ILL_POSED
    except NumericalFailureError as exc:
        print(f"❌ Numerical failure: {exc}")
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json({"error": str(exc), "diagnostics": exc.diagnostics}, out_dir / "diagnostics.json")
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"❌ Invalid problem: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\n👋 Interrupted. Goodbye!")
        sys.exit(130)
