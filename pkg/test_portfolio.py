#!/usr/bin/env python3
"""
Test script for wealth reconstruction, the feedback portfolio and
Monte Carlo replication
"""

import numpy as np
import pytest
from scipy.stats import norm

from market_model import MarketSpec, kernel_law, kernel_quantile
from portfolio import (
    TerminalMap,
    convergence_ladder,
    feedback_portfolio,
    martingale_integrand,
    replicate_and_verify,
    wealth,
    wealth_state,
)
from preferences import ClaimSpec, UtilityModel
from quantile_core import Grid, constant
from vi_solver import calibrate

ZERO = ClaimSpec.constant(0.0)


def reference_setup(utility=None, grid_size=1024, x=1.0):
    market = MarketSpec.constant(1.0, 0.03, 0.25, [[0.2]])
    law = kernel_law(market)
    utility = utility or UtilityModel.exponential(1.0)
    result = calibrate(x, ZERO, utility, kernel_quantile(law, Grid(grid_size)))
    return market, law, result, TerminalMap(result.qbar, law, x)


def test_terminal_map_shape():
    """X* is non-increasing in rho, nonnegative and exact at node scores"""
    print("🗺️ TERMINAL MAP TEST")
    print("=" * 60)
    market, law, result, terminal = reference_setup()
    rho = np.sort(np.random.default_rng(0).lognormal(law.m, law.s, size=500))
    values = terminal(rho)
    assert np.all(np.diff(values) <= 1e-12)
    assert np.all(values >= 0.0)
    # with alpha = 1 the optimum is X* = -ln(lambda) - ln(rho)
    inner = rho[(rho > 0.6) & (rho < 1.4)]
    np.testing.assert_allclose(terminal(inner), -np.log(result.lam_star) - np.log(inner), atol=1e-9)
    assert terminal(1e6) == 0.0

    scores = norm.ppf(result.qbar.grid.nodes)
    np.testing.assert_array_equal(terminal.at_score(scores), result.qbar.values)
    middle = terminal.at_score(0.5 * (scores[1:] + scores[:-1]))
    assert np.all(middle >= result.qbar.values[:-1]) and np.all(middle <= result.qbar.values[1:])
    print("✅ Terminal map decreasing and matches the classical formula")


def test_wealth_closed_form():
    """Y(t, y) = E[R] (-ln lam - ln y - m_t - s_t^2) at t = 1/2"""
    print("\n" + "=" * 60)
    print("💰 WEALTH PROCESS TEST")
    print("=" * 60)
    market, law, result, terminal = reference_setup()
    t = 0.5
    m_t = -0.03 * 0.5 - 0.5 * 0.0625 * 0.5
    s2_t = 0.0625 * 0.5
    growth = np.exp(m_t + 0.5 * s2_t)
    # y stays where the zero floor carries less than 1e-8 of conditional value
    y = np.array([0.8, np.exp(m_t), 1.1])
    expected = growth * (-np.log(result.lam_star) - np.log(y) - m_t - s2_t)
    np.testing.assert_allclose(wealth(t, y, terminal, market), expected, rtol=0.0, atol=1e-8)

    np.testing.assert_allclose(wealth(1.0, y, terminal, market), terminal(y), rtol=0.0, atol=1e-15)
    assert abs(float(wealth(0.0, 1.0, terminal, market)) - 1.0) < 1e-3
    with pytest.raises(ValueError):
        wealth(t, [0.0], terminal, market)
    with pytest.raises(ValueError):
        wealth(1.5, [1.0], terminal, market)
    print(f"   Y(1/2, y) = {np.round(expected, 6)}")
    print("✅ Wealth matches the Gaussian closed form")


def exponential_holding(t, y, lam):
    """theta e^{-r (T - t)} P(X* > 0 | varrho(t) = y) / sigma for alpha = 1."""
    s_t = 0.25 * np.sqrt(1.0 - t)
    m_t = -0.03 * (1.0 - t) - 0.5 * s_t ** 2
    if s_t == 0.0:
        return 0.25 * np.exp(-0.03 * (1.0 - t)) / 0.2
    alive = norm.cdf((-np.log(lam) - np.log(y) - m_t - s_t ** 2) / s_t)
    return 0.25 * np.exp(-0.03 * (1.0 - t)) * alive / 0.2


def test_feedback_portfolio_exponential():
    """pi = theta e^{-r (T - t)} / (alpha sigma) away from the zero floor"""
    print("\n" + "=" * 60)
    print("📊 FEEDBACK PORTFOLIO TEST")
    print("=" * 60)
    market, law, result, terminal = reference_setup()
    for t in (0.0, 0.25):
        for y in (0.9, 1.0, 1.1):
            expected = exponential_holding(t, y, result.lam_star)
            pi = feedback_portfolio(t, y, market, terminal)
            assert pi.shape == (1,)
            assert abs(pi[0] / expected - 1.0) < 1e-4, (t, y, pi)
    for t in (0.5, 0.9):
        classical = 0.25 * np.exp(-0.03 * (1.0 - t)) / 0.2
        for y in (0.9, 1.0, 1.1):
            pi = feedback_portfolio(t, y, market, terminal)
            assert abs(pi[0] / classical - 1.0) < 1e-6, (t, y, pi)
    batch = feedback_portfolio(0.5, np.array([0.9, 1.0, 1.1]), market, terminal)
    assert batch.shape == (3, 1)

    state = wealth_state(0.5, 1.0, terminal, market)
    assert abs(state.Y_t - float(wealth(0.5, 1.0, terminal, market))) < 1e-15
    assert abs(state.pi_t[0] / (0.25 * np.exp(-0.015) / 0.2) - 1.0) < 1e-6
    print(f"   pi(1/2) = {state.pi_t[0]:.6f}")
    print("✅ Portfolio matches the classical exponential holding")


def test_constant_payoff_needs_no_stocks():
    market = MarketSpec.constant(1.0, 0.03, 0.25, [[0.2]])
    law = kernel_law(market)
    terminal = TerminalMap(constant(0.7, Grid(256)), law, 0.7 * np.exp(-0.03))
    for t in (0.0, 0.5):
        assert abs(float(wealth(t, 1.0, terminal, market)) - 0.7 * np.exp(-0.03 * (1.0 - t))) < 1e-12
        np.testing.assert_allclose(feedback_portfolio(t, 1.0, market, terminal), [0.0], atol=1e-8)
    integrand = martingale_integrand(0.5, np.array([0.8, 1.0, 1.2]), market, terminal)
    assert integrand.shape == (3, 1)


def test_replication_exponential():
    """Feedback trading from X(0) = x reproduces X*(varrho(T)) within 1%"""
    print("\n" + "=" * 60)
    print("🎲 REPLICATION TEST")
    print("=" * 60)
    market, law, result, terminal = reference_setup()
    report = replicate_and_verify(market, terminal, n_paths=2000, n_steps=256, seed=1)
    assert report["relative_rmse"] <= 0.01
    assert report["budget_gap"] == 0.0
    assert report["model_budget_gap"] < 1e-3
    assert report["anti_monotone"]
    assert report["max_martingale_z"] <= 3.0
    assert len(report["martingale_checks"]) == 4
    assert "paths" not in report
    print(f"   relative RMSE = {report['relative_rmse']:.4%}")
    print(f"   max martingale z = {report['max_martingale_z']:.2f}")

    kept = replicate_and_verify(market, terminal, n_paths=50, n_steps=32, seed=1, keep_paths=True)
    assert kept["wealth_paths"].shape == (50, 33)
    assert np.all(kept["wealth_paths"][:, 0] == 1.0)
    with pytest.raises(ValueError):
        replicate_and_verify(market, terminal, n_paths=10, n_steps=8, seed=1)
    print("✅ Replication within tolerance")


def test_euler_convergence_ladder():
    """Log-utility wealth is a geometric motion: RMSE falls like sqrt(dt)"""
    print("\n" + "=" * 60)
    print("🪜 CONVERGENCE LADDER TEST")
    print("=" * 60)
    market, law, result, terminal = reference_setup(UtilityModel.logarithmic())
    ladder = convergence_ladder(market, terminal, n_paths=2000, ladder=(32, 64, 128, 256), seed=3)
    assert ladder["steps"] == [32, 64, 128, 256]
    assert np.all(np.diff(ladder["rmse"]) < 0.0)
    for ratio in ladder["ratios"]:
        assert 0.6 <= ratio <= 0.85, ladder
    print(f"   RMSE ratios: {np.round(ladder['ratios'], 3)}")
    with pytest.raises(ValueError):
        convergence_ladder(market, terminal, n_paths=10, ladder=(48, 64))
    print("✅ Strong order one half observed")


if __name__ == "__main__":
    tests = [
        ("Terminal map", test_terminal_map_shape),
        ("Wealth closed form", test_wealth_closed_form),
        ("Feedback portfolio", test_feedback_portfolio_exponential),
        ("Constant payoff", test_constant_payoff_needs_no_stocks),
        ("Replication", test_replication_exponential),
        ("Convergence ladder", test_euler_convergence_ladder),
    ]
    for name, test in tests:
        test()
        print(f"✅ {name} passed")
