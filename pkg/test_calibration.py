#!/usr/bin/env python3
"""
Calibration tests: closed-form Dandelion, numerical Diamond, general topologies
"""

import math
import sys
from pathlib import Path

import numpy as np
from scipy.special import logit

sys.path.insert(0, str(Path(__file__).parent))

from calibration import (
    CalibrationResult,
    DandelionEmpirical,
    DiamondEmpirical,
    FitConfig,
    calibrate_dandelion,
    calibrate_diamond,
    calibrate_general,
    forward_jacobian,
    jacobian_norm,
    parameter_sensitivity,
)
from core import JungleParams, PortfolioSpec
from errors import CalibrationDomainError, ConvergenceError, PortfolioValidationError
from exact_models import dandelion_moments, dandelion_pmf, diamond_moment_arrays, diamond_moments, DiamondParams
from risk import var_es
from sampler import enumerate_exact

SEED = 271828


def test_dandelion_independence_gives_zero_beta():
    result = calibrate_dandelion(DandelionEmpirical(n=50, p=0.03, p0=0.07, rho=0.0))
    assert abs(result.params.beta) < 1e-12
    assert abs(result.params.alpha - logit(0.03)) < 1e-12
    assert result.success


def test_dandelion_reproduces_speculative_grade_tail():
    params = calibrate_dandelion(DandelionEmpirical(n=800, p=0.028, p0=0.028, rho=0.08)).params
    report = var_es(dandelion_pmf(params), 0.99)
    assert abs(report.var - 0.109) <= 0.002, report.var
    assert abs(report.es - 0.117) <= 0.002, report.es


def test_dandelion_round_trip():
    rng = np.random.default_rng(SEED)
    checked = 0
    while checked < 1000:
        n = int(rng.integers(1, 1000))
        p, p0 = rng.uniform(0.001, 0.6, size=2)
        rho = rng.uniform(-0.2, 0.6)
        emp = DandelionEmpirical(n=n, p=p, p0=p0, rho=rho)
        try:
            result = calibrate_dandelion(emp)
        except CalibrationDomainError:
            continue
        checked += 1
        assert result.residual < 1e-9, (n, p, p0, rho, result.residual)
        m = dandelion_moments(result.params)
        assert abs(m.p - p) < 1e-9 and abs(m.p0 - p0) < 1e-9 and abs(m.rho - rho) < 1e-9
        if rho > 0:
            assert result.params.beta > 0


def test_dandelion_infeasible_names_bracket():
    try:
        calibrate_dandelion(DandelionEmpirical(n=10, p=0.01, p0=0.5, rho=0.9))
    except CalibrationDomainError as e:
        assert e.bracket == "p - q > 0"
        return
    raise AssertionError("q above p should be rejected")


def test_diamond_independence_gives_zero_beta():
    result = calibrate_diamond(DiamondEmpirical(n=30, p=0.2, rho=0.0))
    assert abs(result.params.beta) < 1e-9
    assert abs(result.params.alpha - logit(0.2)) < 1e-9


def test_diamond_critical_point_moments():
    m = diamond_moments(DiamondParams(n=80, alpha=-2.0, beta=4.0 / 80))
    assert abs(m.p - 0.44) <= 0.02, m.p
    assert abs(m.rho - 0.11) <= 0.02, m.rho


def test_diamond_reproduces_targets():
    result = calibrate_diamond(DiamondEmpirical(n=20, p=0.40, rho=0.10))
    m = diamond_moments(result.params)
    assert abs(m.p - 0.40) < 1e-9 and abs(m.rho - 0.10) < 1e-9
    assert result.params.beta > 0
    assert result.roots[0] == (result.params.alpha, result.params.beta)


def test_diamond_bracketing_fallback_reproduces_targets():
    for n, p, rho in [(20, 0.40, 0.30), (80, 0.44, 0.11), (50, 0.028, 0.20)]:
        result = calibrate_diamond(DiamondEmpirical(n=n, p=p, rho=rho), max_iter=0)
        assert result.method == "bracketing", (n, p, rho)
        assert result.success
        m = diamond_moments(result.params)
        assert abs(m.p - p) < 1e-9 and abs(m.rho - rho) < 1e-9, (n, m.p, m.rho)
        # corner starts get no Newton steps either
        assert result.roots == [(result.params.alpha, result.params.beta)]
        assert not result.multiple_roots


def test_diamond_reports_every_root_near_transition():
    result = calibrate_diamond(DiamondEmpirical(n=80, p=0.44, rho=0.11))
    assert result.roots[0] == (result.params.alpha, result.params.beta)
    assert result.multiple_roots == (len(result.roots) > 1)
    for alpha, beta in result.roots:
        m = diamond_moments(DiamondParams(n=80, alpha=alpha, beta=beta))
        assert abs(m.p - 0.44) < 1e-6 and abs(m.rho - 0.11) < 1e-6, (alpha, beta)
    for i, a in enumerate(result.roots):
        for b in result.roots[i + 1:]:
            assert math.hypot(a[0] - b[0], a[1] - b[1]) > 1e-4
    doc = result.to_dict()
    assert doc["multiple_roots"] == result.multiple_roots
    assert len(doc["roots"]) == len(result.roots)

    single = calibrate_diamond(DiamondEmpirical(n=80, p=0.44, rho=0.11), multistart=False)
    assert len(single.roots) == 1 and not single.multiple_roots


def test_multiple_roots_flag():
    params = DiamondParams(n=10, alpha=-1.0, beta=0.1)
    result = CalibrationResult(params=params, residual=0.0, iterations=3, tolerance=1e-9, method="newton",
                               roots=[(-1.0, 0.1), (-3.0, 0.5)])
    assert result.multiple_roots
    assert result.to_dict()["roots"] == [[-1.0, 0.1], [-3.0, 0.5]]

def test_diamond_round_trip_away_from_ridge():
    rng = np.random.default_rng(SEED + 1)
    checked = 0
    while checked < 200:
        n = int(rng.integers(5, 60))
        p = rng.uniform(0.02, 0.6)
        rho = rng.uniform(-0.3 / (n - 1), 0.08)
        # keep clear of the lower moment hull, where beta runs off to -inf
        frac = n * p - math.floor(n * p)
        if n * p * (1 - p) * (1 + (n - 1) * rho) < 2 * frac * (1 - frac) + 0.05:
            continue
        checked += 1
        result = calibrate_diamond(DiamondEmpirical(n=n, p=p, rho=rho), multistart=False)
        stats = diamond_moment_arrays(n, result.params.alpha, result.params.beta)
        assert abs(float(stats["p"]) - p) < 1e-9
        assert abs(float(stats["rho"]) - rho) < 1e-9
        assert (result.params.beta > 0) == (rho > 0)


def test_diamond_rejects_infeasible_targets():
    try:
        calibrate_diamond(DiamondEmpirical(n=10, p=0.3, rho=-0.5))
    except CalibrationDomainError:
        return
    raise AssertionError("rho below the exchangeable bound should be rejected")


def test_sensitivity_peaks_at_the_transition():
    n, beta = 80, 0.1
    alphas = np.linspace(-6.0, -1.9, 411)
    norms = np.array([jacobian_norm(n, a, beta) for a in alphas])
    peak = norms.max()
    assert peak > 10 * norms[0] and peak > 10 * norms[-1]
    assert abs(alphas[np.argmax(norms)] + beta * (n - 1) / 2) < 0.1


def test_parameter_sensitivity_inverts_forward_jacobian():
    jac = forward_jacobian(20, -1.5, 0.08)
    assert np.allclose(parameter_sensitivity(20, -1.5, 0.08) @ jac, np.eye(2), atol=1e-8)


def test_general_without_edges_is_independent():
    spec = PortfolioSpec(n=4, p=[0.01, 0.2, 0.5, 0.9])
    result = calibrate_general(spec)
    assert np.allclose(result.params.alpha, logit(spec.p), atol=1e-14)
    assert result.params.beta == {}
    assert result.method == "independent"


def test_general_agrees_with_dandelion_closed_form():
    n_peripheral, p, p0, rho = 9, 0.1, 0.15, 0.2
    closed = calibrate_dandelion(DandelionEmpirical(n=n_peripheral, p=p, p0=p0, rho=rho)).params
    spec = PortfolioSpec(n=n_peripheral + 1, p=[p0] + [p] * n_peripheral,
                         rho={(0, i): rho for i in range(1, n_peripheral + 1)})
    result = calibrate_general(spec, FitConfig(mode="exact", tol=1e-11))
    assert result.success
    assert abs(result.params.alpha[0] - closed.alpha0) < 1e-6
    assert max(abs(a - closed.alpha) for a in result.params.alpha[1:]) < 1e-6
    assert max(abs(b - closed.beta) for b in result.params.beta.values()) < 1e-6


def test_general_plant_and_recover():
    rng = np.random.default_rng(SEED + 2)
    for _ in range(50):
        n = 6
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        chosen = rng.choice(len(pairs), size=int(rng.integers(3, 9)), replace=False)
        planted = JungleParams(alpha=list(rng.uniform(-2.5, 0.0, size=n)),
                               beta={pairs[k]: float(rng.uniform(-0.5, 1.5)) for k in chosen})
        exact = enumerate_exact(planted)
        spec = PortfolioSpec(n=n, p=list(exact.p),
                             rho={(i, j): exact.rho(i, j) for (i, j) in planted.beta})

        result = calibrate_general(spec, FitConfig(mode="exact"))
        assert result.residual < 1e-6
        fitted = enumerate_exact(result.params)
        assert np.max(np.abs(fitted.p - exact.p)) < 1e-6
        for (i, j) in planted.beta:
            assert abs(fitted.q(i, j) - exact.q(i, j)) < 1e-6


def test_general_rejects_infeasible_targets():
    spec = PortfolioSpec(n=3, p=[0.01, 0.5, 0.2], rho={(0, 1): 0.9})
    try:
        calibrate_general(spec)
    except CalibrationDomainError:
        return
    raise AssertionError("q above min(p_i, p_j) should be rejected")


def test_general_rejects_invalid_portfolio():
    spec = PortfolioSpec(n=2, p=[0.0, 0.5], rho={(0, 1): 0.1})
    try:
        calibrate_general(spec)
    except PortfolioValidationError:
        return
    raise AssertionError("boundary probabilities should be rejected")


def test_general_reports_non_convergence():
    spec = PortfolioSpec(n=4, p=[0.1, 0.2, 0.3, 0.4], rho={(0, 1): 0.3, (1, 2): 0.2, (2, 3): 0.25})
    try:
        calibrate_general(spec, FitConfig(mode="exact", max_iter=1, tol=1e-14))
    except ConvergenceError as e:
        assert e.residual > 1e-14
        assert len(e.trace) == 2
        return
    raise AssertionError("one iteration should not reach 1e-14")


def test_general_sampled_mode_small_topology():
    spec = PortfolioSpec(n=4, p=[0.2, 0.3, 0.25, 0.35], rho={(0, 1): 0.2, (1, 2): 0.1, (2, 3): 0.15})
    result = calibrate_general(spec, FitConfig(mode="sampled", tol=0.01, max_iter=60, seed=7))
    exact = enumerate_exact(result.params)
    assert np.max(np.abs(exact.p - np.asarray(spec.p))) < 0.03
    for (i, j) in spec.rho:
        assert abs(exact.rho(i, j) - spec.rho[(i, j)]) < 0.1


def test_calibration_result_to_dict():
    result = calibrate_general(PortfolioSpec(n=3, p=[0.1, 0.2, 0.3], rho={(0, 2): 0.1}))
    doc = result.to_dict()
    assert doc["success"] is True
    assert set(doc["params"]["beta"]) == {"0-2"}
    assert math.isfinite(doc["residual"])


def main():
    """Run all tests"""
    print("🧪 Calibration tests")
    print("=" * 40)
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {e}")
    print(f"\n{len(tests) - failed}/{len(tests)} passed")
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
