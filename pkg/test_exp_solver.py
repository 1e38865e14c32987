#!/usr/bin/env python3
"""
Test script for the exponential-utility envelope route

Checks the probability weighting, the concave envelope and the agreement
of the envelope solution with the general solver.
"""

import itertools

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from exp_solver import concave_envelope, envelope_input, solve_exponential, weighting
from market_model import KernelLaw, kernel_quantile
from preferences import ClaimSpec, UtilityModel
from quantile_core import Grid
from vi_solver import calibrate

REFERENCE_LAW = KernelLaw(-0.06125, 0.25)
TWO_POINT = ClaimSpec.atoms([0.0, 1.0])


def brute_force_envelope(z, f):
    """Largest chord value over every pair of points straddling each abscissa."""
    delta = f.copy()
    for i, j in itertools.combinations(range(z.size), 2):
        inside = np.arange(i, j + 1)
        chord = f[i] + (f[j] - f[i]) * (z[inside] - z[i]) / (z[j] - z[i])
        delta[inside] = np.maximum(delta[inside], chord)
    return delta


def test_two_point_weighting():
    """w(1/2) = e^{-1} / (1 + e^{-1}) for the equal-weight {0, 1} claim"""
    print("⚖️ WEIGHTING FUNCTION TEST")
    print("=" * 60)
    w = weighting(TWO_POINT, 1.0, Grid(256))
    assert abs(w(0.5) - 0.268941) < 1e-6
    assert abs(w(0.5) - np.exp(-1.0) / (1.0 + np.exp(-1.0))) < 1e-15
    assert abs(w.normalizer - 0.5 * (1.0 + np.exp(-1.0))) < 1e-15
    assert w(0.0) == 0.0 and w(1.0) == 1.0
    assert np.all(np.diff(w.values) > 0.0)
    assert abs(w.inverse(w(0.5)) - 0.5) < 1e-12
    assert abs(w.inverse(w(0.3)) - 0.3) < 1e-12
    print(f"   w(1/2) = {float(w(0.5)):.6f}")
    print("✅ Weighting matches the two-piece integral")


def test_weighting_rejects_constant_claim():
    with pytest.raises(ValueError):
        weighting(ClaimSpec.constant(1.0), 1.0, Grid(64))
    with pytest.raises(ValueError):
        weighting(ClaimSpec.atoms([0.0, 1.0], [0.999, 0.001]), 1.0, Grid(8))
    with pytest.raises(ValueError):
        weighting(TWO_POINT, -1.0, Grid(64))


def test_envelope_input_endpoints():
    """f runs from -E[rho]/E|u| at z = 0 up to 0 at z = 1"""
    print("\n" + "=" * 60)
    print("📐 ENVELOPE INPUT TEST")
    print("=" * 60)
    grid = Grid(256)
    kernel = kernel_quantile(REFERENCE_LAW, grid)
    z, f, w = envelope_input(TWO_POINT, 1.0, REFERENCE_LAW, grid)
    assert z[0] == 0.0 and z[-1] == 1.0
    assert np.all(np.diff(z) > 0.0)
    assert f[-1] == 0.0
    assert abs(f[0] + float(np.mean(kernel.values)) / w.normalizer) < 1e-12
    assert np.all(np.diff(f) >= 0.0)

    # z at the image of 1/2 and the partial integral of Q_rho up to 1/2
    assert abs(z[128] - (1.0 - 0.268941)) < 1e-6
    half_integral, _ = integrate.quad(lambda s: float(REFERENCE_LAW.ppf(s)), 0.0, 0.5)
    closed = REFERENCE_LAW.mean() * norm.cdf(-REFERENCE_LAW.s)
    assert abs(half_integral - closed) < 1e-9
    assert abs(f[128] + closed / w.normalizer) < 1e-4
    print(f"   f at w-image of 1/2 = {f[128]:.6f} vs {-closed / w.normalizer:.6f}")
    print("✅ Envelope input endpoints and midpoint correct")


def test_concave_envelope_examples():
    z = np.linspace(0.0, 1.0, 11)
    f = -(z - 0.3) ** 2
    result = concave_envelope(z, f)
    np.testing.assert_array_equal(result.delta, f)
    assert result.on_hull.all()
    np.testing.assert_allclose(result.slopes, np.diff(f) / np.diff(z), rtol=1e-12)

    result = concave_envelope([0.0, 0.5, 1.0], [0.0, -1.0, 0.0])
    np.testing.assert_array_equal(result.delta, [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(result.slopes, [0.0, 0.0])
    np.testing.assert_array_equal(result.hull_knots, [0, 2])

    with pytest.raises(ValueError):
        concave_envelope([0.0, 1.0, 0.5], [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        concave_envelope([0.0, 1.0], [0.0, np.inf])


def test_concave_envelope_chord_oracle():
    """Monotone-chain hull equals the pairwise chord maximum on random points"""
    print("\n" + "=" * 60)
    print("🪢 CHORD ORACLE TEST")
    print("=" * 60)
    rng = np.random.default_rng(5)
    for _ in range(20):
        z = np.concatenate([[0.0], np.sort(rng.uniform(0.0, 1.0, size=48)), [1.0]])
        f = rng.normal(size=50)
        result = concave_envelope(z, f)
        np.testing.assert_allclose(result.delta, brute_force_envelope(z, f), rtol=0.0, atol=1e-12)
        assert np.all(result.delta >= f - 1e-12)
        assert np.all(np.diff(result.slopes) <= 1e-12)
        np.testing.assert_array_equal(result.delta[result.hull_knots], f[result.hull_knots])
    print("✅ 20 random point sets match the brute-force envelope")


def test_route_equivalence():
    """Envelope and general solver agree within 5/n and on the multiplier"""
    print("\n" + "=" * 60)
    print("🔁 ROUTE EQUIVALENCE TEST")
    print("=" * 60)
    exp_utility = UtilityModel.exponential(1.0)
    for n in (256, 1024, 4096):
        grid = Grid(n)
        envelope = solve_exponential(1.0, TWO_POINT, 1.0, REFERENCE_LAW, grid)
        general = calibrate(1.0, TWO_POINT, exp_utility, kernel_quantile(REFERENCE_LAW, grid))
        assert not envelope.floor_binding
        gap = float(np.max(np.abs(envelope.solution.qbar.values - general.qbar.values)))
        assert gap <= 5.0 / n, (n, gap)
        assert abs(envelope.solution.lam_star / general.lam_star - 1.0) < 1e-6
        assert abs(envelope.solution.budget_residual) <= 1e-8
        print(f"   n={n:5d}: sup gap {gap:.2e}, lambda {envelope.solution.lam_star:.10f}")
    print("✅ Both routes give the same optimum")


def test_hull_gaps_match_flat_blocks():
    """Points strictly inside a hull segment are the flat increments of Qbar"""
    grid = Grid(1024)
    envelope = solve_exponential(1.0, TWO_POINT, 1.0, REFERENCE_LAW, grid)
    general = calibrate(1.0, TWO_POINT, UtilityModel.exponential(1.0), kernel_quantile(REFERENCE_LAW, grid))
    inside_segment = set(np.flatnonzero(~envelope.envelope.on_hull[1:-1]).tolist())
    flat = set(np.flatnonzero(np.diff(general.qbar.values) == 0.0).tolist())
    assert inside_segment
    assert len(inside_segment ^ flat) <= 4

    qbar = envelope.solution.qbar.values
    assert np.all(np.diff(qbar) >= 0.0)
    assert np.all(np.diff(envelope.delta_prime) <= 0.0)
    assert np.all(envelope.delta_prime > 0.0)


def test_constant_claim_gives_classical_solution():
    """Identity weighting reproduces the Merton exponential quantile"""
    grid = Grid(1024)
    kernel = kernel_quantile(REFERENCE_LAW, grid)
    rho_hat = kernel.reversed_values()
    level = (1.0 + np.mean(rho_hat * np.log(rho_hat))) / np.mean(rho_hat)
    merton = level - np.log(rho_hat)
    for value in (0.0, 0.3):
        claim = ClaimSpec.constant(value)
        result = solve_exponential(1.0, claim, 1.0, REFERENCE_LAW, grid)
        assert result.degenerate_claim
        np.testing.assert_allclose(result.solution.qbar.values, merton, rtol=0.0, atol=1e-9)
        assert abs(result.solution.lam_star / np.exp(-level - value) - 1.0) < 1e-9
        assert result.terminal_map is not None


def test_floor_binding_is_reported():
    result = solve_exponential(0.05, TWO_POINT, 1.0, REFERENCE_LAW, Grid(256))
    assert result.floor_binding
    assert result.terminal_map is None
    assert result.solution.qbar.values[0] < 0.0
    with pytest.raises(ValueError):
        solve_exponential(0.0, TWO_POINT, 1.0, REFERENCE_LAW, Grid(256))


if __name__ == "__main__":
    tests = [
        ("Two-point weighting", test_two_point_weighting),
        ("Constant claim rejected", test_weighting_rejects_constant_claim),
        ("Envelope input", test_envelope_input_endpoints),
        ("Envelope examples", test_concave_envelope_examples),
        ("Chord oracle", test_concave_envelope_chord_oracle),
        ("Route equivalence", test_route_equivalence),
        ("Hull gaps vs flat blocks", test_hull_gaps_match_flat_blocks),
        ("Classical reduction", test_constant_claim_gives_classical_solution),
        ("Floor binding", test_floor_binding_is_reported),
    ]
    for name, test in tests:
        test()
        print(f"✅ {name} passed")
