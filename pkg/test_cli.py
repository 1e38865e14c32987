#!/usr/bin/env python3
"""
Test script for the command-line interface
Runs each command on small problems and checks files and exit codes
"""

import copy
import json
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from main import EXIT_CONFIG, EXIT_ILL_POSED, EXIT_OK, main
from market_model import kernel_quantile
from preferences import ClaimSpec, UtilityModel, lagrangian_objective
from problem_config import load_config
from quantile_core import Grid, QuantileFunction

SMALL_PROBLEM = {
    "market": {"T": 1.0, "r": 0.03, "theta": [0.25], "sigma": [[0.2]]},
    "utility": {"kind": "exponential", "alpha": 1.0},
    "claim": {"kind": "atoms", "values": [0.0, 1.0], "probs": [0.5, 0.5]},
    "wealth": 1.0,
    "grid": 256,
    "seed": 11,
    "simulation": {"n_paths": 200, "n_steps": 32, "n_saved_paths": 5, "n_workers": 2},
}


def write_config(directory: Path, name: str = "problem.json", **changes) -> Path:
    data = copy.deepcopy(SMALL_PROBLEM)
    for key, value in changes.items():
        if value is None:
            data.pop(key, None)
        else:
            data[key] = value
    path = directory / name
    path.write_text(json.dumps(data))
    return path


def run(command, config, out, *extra):
    return main([command, "--config", str(config), "--out", str(out), *extra])


def test_solve_writes_solution(tmp_path):
    """solve writes the quantile table and a summary"""
    print("🧮 CLI SOLVE TEST")
    print("=" * 60)
    config = write_config(tmp_path)
    assert run("solve", config, tmp_path / "out") == EXIT_OK

    table = pd.read_csv(tmp_path / "out" / "solution.csv")
    assert list(table.columns) == ["t", "Qbar", "Lambda", "H"]
    assert len(table) == 256
    assert np.all(np.diff(table["Qbar"]) >= 0.0)

    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["complementarity_passed"]
    assert abs(summary["budget_residual"]) <= 1e-8
    assert summary["grid"] == 256
    assert summary["wellposed"]["statement5"]
    print(f"   lambda* = {summary['lambda']:.10f}")
    print("✅ solve output complete")


def test_outputs_are_deterministic(tmp_path):
    """Same inputs give byte-identical files"""
    config = write_config(tmp_path)
    for command, files in (("solve", ["solution.csv", "summary.json"]),
                           ("price", ["price.json"]),
                           ("simulate", ["paths.csv", "summary.json"])):
        assert run(command, config, tmp_path / "a") == EXIT_OK
        assert run(command, config, tmp_path / "b") == EXIT_OK
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_solution_file_round_trip(tmp_path):
    """Reloaded Qbar reproduces the reported dual value"""
    config = write_config(tmp_path)
    assert run("solve", config, tmp_path / "out") == EXIT_OK
    table = pd.read_csv(tmp_path / "out" / "solution.csv")
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())

    loaded = load_config(config)
    grid = Grid(len(table))
    qbar = QuantileFunction(grid, table["Qbar"].to_numpy())
    kernel = kernel_quantile(loaded.law, grid)
    value = lagrangian_objective(qbar, summary["lambda"], loaded.claim, loaded.utility, kernel)
    assert abs(value - summary["V_lambda"]) < 1e-10
    assert abs(value + summary["lambda"] * summary["x"] - summary["V0"]) < 1e-10


def test_check_and_price(tmp_path):
    config = write_config(tmp_path)
    assert run("check", config, tmp_path / "check") == EXIT_OK
    report = json.loads((tmp_path / "check" / "check.json").read_text())
    assert report["statement5"] and report["finitecon1"] and report["assumption_a2"]
    assert report["inverse_marginal_error"] < 1e-10

    assert run("price", config, tmp_path / "price") == EXIT_OK
    price = json.loads((tmp_path / "price" / "price.json").read_text())
    assert price["exists"]
    assert 0.0 < price["p"] < np.exp(-0.03)

    zero = write_config(tmp_path, "zero.json", claim={"kind": "constant", "value": 0.0})
    assert run("price", zero, tmp_path / "zero") == EXIT_OK
    assert json.loads((tmp_path / "zero" / "price.json").read_text())["p"] == 0.0


def test_exponential_commands(tmp_path):
    config = write_config(tmp_path)
    assert run("solve-exp", config, tmp_path / "exp") == EXIT_OK
    table = pd.read_csv(tmp_path / "exp" / "exp_solution.csv")
    assert list(table.columns) == ["t", "Qbar", "delta_prime"]

    assert run("envelope", config, tmp_path / "env") == EXIT_OK
    envelope = pd.read_csv(tmp_path / "env" / "envelope.csv")
    assert len(envelope) == 257
    assert set(envelope["on_hull"].unique()) <= {0, 1}
    summary = json.loads((tmp_path / "env" / "summary.json").read_text())
    assert abs(summary["w_half"] - 0.268941) < 1e-6


def test_simulate_and_overrides(tmp_path):
    config = write_config(tmp_path)
    assert run("simulate", config, tmp_path / "sim", "--seed", "5") == EXIT_OK
    paths = pd.read_csv(tmp_path / "sim" / "paths.csv")
    assert list(paths.columns) == ["path_id", "t", "varrho", "wealth"]
    assert len(paths) == 5 * 33
    summary = json.loads((tmp_path / "sim" / "summary.json").read_text())
    assert summary["seed"] == 5
    assert summary["budget_gap"] == 0.0

    assert run("solve", config, tmp_path / "coarse", "--grid", "128") == EXIT_OK
    assert len(pd.read_csv(tmp_path / "coarse" / "solution.csv")) == 128


def test_bad_configs_exit_with_code_2(tmp_path):
    """Malformed or unsupported problems are configuration errors"""
    print("\n" + "=" * 60)
    print("🚫 CLI ERROR HANDLING TEST")
    print("=" * 60)
    unknown = write_config(tmp_path, "unknown.json", wobble=1)
    assert run("solve", unknown, tmp_path / "o1") == EXIT_CONFIG

    assert run("solve", tmp_path / "missing.json", tmp_path / "o2") == EXIT_CONFIG

    both = write_config(tmp_path, "both.json", kernel={"m": -0.06125, "s": 0.25})
    assert run("solve", both, tmp_path / "o3") == EXIT_CONFIG

    log_utility = write_config(tmp_path, "log.json", utility={"kind": "log", "shift": 1.0})
    assert run("solve-exp", log_utility, tmp_path / "o4") == EXIT_CONFIG

    bare = write_config(tmp_path, "bare.json", market=None, kernel={"m": -0.06125, "s": 0.25})
    assert run("simulate", bare, tmp_path / "o5") == EXIT_CONFIG
    assert run("solve", bare, tmp_path / "o6") == EXIT_OK

    outside = write_config(tmp_path, "outside.json", utility={"kind": "log"})
    assert run("solve", outside, tmp_path / "o7") == EXIT_CONFIG
    print("✅ Configuration problems map to exit code 2")


def test_missing_price_exits_with_code_3(tmp_path):
    config = write_config(tmp_path, wealth=0.01, claim={"kind": "constant", "value": 50.0})
    assert run("price", config, tmp_path / "out") == EXIT_ILL_POSED
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["report"]["status"] == "no_price"


def test_reference_configs_load():
    here = Path(__file__).parent / "configs"
    reference = load_config(here / "reference.json")
    assert reference.grid.n == 4096
    assert abs(reference.law.m - (-0.06125)) < 1e-15 and reference.law.s == 0.25
    assert reference.claim == ClaimSpec.atoms([0.0, 1.0], [0.5, 0.5])
    two_piece = load_config(here / "two_piece_rate.json", grid=512)
    assert two_piece.grid.n == 512
    assert two_piece.utility == UtilityModel.logarithmic(shift=1.0)
    assert abs(two_piece.law.m - (-0.06125)) < 1e-14


if __name__ == "__main__":
    tests = [
        ("Solve", test_solve_writes_solution),
        ("Determinism", test_outputs_are_deterministic),
        ("Round trip", test_solution_file_round_trip),
        ("Check and price", test_check_and_price),
        ("Exponential commands", test_exponential_commands),
        ("Simulate and overrides", test_simulate_and_overrides),
        ("Bad configs", test_bad_configs_exit_with_code_2),
        ("Missing price", test_missing_price_exits_with_code_3),
    ]
    for name, test in tests:
        with tempfile.TemporaryDirectory() as tmp:
            test(Path(tmp))
        print(f"✅ {name} passed")
    test_reference_configs_load()
    print("✅ Reference configs passed")
