#!/usr/bin/env python3
"""
Sampler, enumeration oracle and monetary-loss tests
"""

import math
import sys
from pathlib import Path

import numpy as np
from scipy.linalg import null_space
from scipy.special import logit

sys.path.insert(0, str(Path(__file__).parent))

from calibration import DandelionEmpirical, DiamondEmpirical, calibrate_dandelion, calibrate_diamond
from core import (
    BorrowerSpecificRecovery,
    CentralNodeRecovery,
    ConstantRecovery,
    JungleParams,
    LinearInAggregateRecovery,
    PortfolioSpec,
)
from errors import ConfigurationError, EnumerationLimitError
from exact_models import DiamondParams, binomial_pmf, dandelion_pmf, diamond_pmf
from risk import detect_peaks
from sampler import (
    McmcConfig,
    enumerate_exact,
    gibbs_sample,
    index_states,
    losses_from_states,
    monetary_pmf_exact,
    site_kernel,
    split_rhat,
    state_log_weights,
    sweep_kernel,
)
from utils import total_variation


def dandelion_portfolio(n_peripheral, p, rho, recovery=None):
    params = calibrate_dandelion(DandelionEmpirical(n=n_peripheral, p=p, p0=p, rho=rho)).params
    n = n_peripheral + 1
    spec = PortfolioSpec(n=n, p=[p] * n, rho={(0, i): rho for i in range(1, n)}, hub=0,
                         recovery=recovery or ConstantRecovery())
    return params, spec


def test_independent_nodes_hit_their_probability():
    params = JungleParams(alpha=[float(logit(0.028))] * 50)
    config = McmcConfig(chains=4, walkers=250, draws=100, burn_in=10, thin=1, seed=42)
    samples = gibbs_sample(params, config)
    assert samples.size == 100_000
    pooled_se = math.sqrt(0.028 * 0.972 / (samples.size * 50))
    node_se = math.sqrt(0.028 * 0.972 / samples.size)
    assert abs(samples.node_means().mean() - 0.028) < 3 * pooled_se
    assert np.max(np.abs(samples.node_means() - 0.028)) < 4.5 * node_se


def test_dandelion_sampler_matches_closed_form():
    params, _ = dandelion_portfolio(10, 0.1, 0.2)
    config = McmcConfig(chains=4, walkers=1000, draws=250, burn_in=200, thin=2, seed=7)
    samples = gibbs_sample(params.to_jungle(), config)
    assert samples.size == 1_000_000
    peripheral = samples.states[:, 1:].sum(axis=1)
    empirical = np.bincount(peripheral, minlength=11) / samples.size
    assert total_variation(empirical, dandelion_pmf(params).mass) <= 0.01


def test_diamond_sampler_finds_both_modes():
    params = calibrate_diamond(DiamondEmpirical(n=20, p=0.40, rho=0.30)).params
    config = McmcConfig(chains=4, walkers=125, draws=2000, burn_in=500, thin=2, seed=11)
    samples = gibbs_sample(params.to_jungle(), config)
    empirical = samples.empirical_pmf()
    assert total_variation(empirical.mass, diamond_pmf(params).mass) <= 0.02
    assert len(detect_peaks(empirical)) == 2
    assert samples.diagnostics.split_rhat < 1.1


def test_sampler_is_seed_deterministic():
    params = JungleParams(alpha=[-1.0, -0.5, -2.0, 0.3], beta={(0, 1): 0.8, (1, 3): -0.4, (2, 3): 1.1})
    config = McmcConfig(chains=3, walkers=4, draws=50, burn_in=20, thin=3, seed=123)
    first = gibbs_sample(params, config, max_workers=1)
    second = gibbs_sample(params, config, max_workers=4)
    assert np.array_equal(first.states, second.states)
    assert np.array_equal(first.chain, second.chain)
    assert first.diagnostics == second.diagnostics
    other = gibbs_sample(params, config.model_copy(update={"seed": 124}))
    assert not np.array_equal(first.states, other.states)


def test_sample_set_layout():
    params = JungleParams(alpha=[-1.0] * 5, beta={(0, 4): 0.5})
    samples = gibbs_sample(params, McmcConfig(chains=2, walkers=3, draws=10, burn_in=0, thin=1, seed=1))
    assert samples.states.shape == (60, 5)
    assert list(np.unique(samples.chain)) == [0, 1]
    assert np.array_equal(samples.loss_counts, samples.states.sum(axis=1))
    assert len(samples.diagnostics.chains) == 2
    assert abs(samples.empirical_pmf().mass.sum() - 1.0) < 1e-12


def test_split_rhat_detects_disagreeing_chains():
    rng = np.random.default_rng(5)
    mixed = rng.normal(size=(4, 400))
    assert split_rhat(mixed) < 1.05
    stuck = mixed + np.array([[0.0], [0.0], [5.0], [5.0]])
    assert split_rhat(stuck) > 1.5


def test_enumeration_matches_closed_forms():
    alpha = float(logit(0.2))
    independent = enumerate_exact(JungleParams(alpha=[alpha] * 9))
    assert np.max(np.abs(independent.pmf.mass - binomial_pmf(9, 0.2).mass)) < 1e-12

    params = DiamondParams(n=12, alpha=-1.5, beta=0.25)
    assert np.max(np.abs(enumerate_exact(params.to_jungle()).pmf.mass - diamond_pmf(params).mass)) < 1e-12


def test_enumeration_refuses_above_cap():
    try:
        enumerate_exact(JungleParams(alpha=[0.0] * 23))
    except EnumerationLimitError as e:
        assert e.n == 23 and e.cap == 22
        return
    raise AssertionError("n=23 exceeds the enumeration cap")


def test_enumerated_distribution_has_maximum_entropy():
    params = JungleParams(alpha=[-1.0, -0.2, 0.4], beta={(0, 1): 0.9, (0, 2): -0.3, (1, 2): 0.5})
    exact = enumerate_exact(params)
    log_w = state_log_weights(params)
    pi = np.exp(log_w - exact.log_z)
    assert abs(exact.entropy + np.sum(pi * np.log(pi))) < 1e-12

    states = index_states(np.arange(8), 3).astype(float)
    features = np.column_stack([np.ones(8), states,
                                states[:, 0] * states[:, 1], states[:, 0] * states[:, 2], states[:, 1] * states[:, 2]])
    directions = null_space(features.T)
    assert directions.shape[1] == 1
    d = directions[:, 0]
    for eps in (1e-3, -1e-3, 1e-2, -1e-2):
        perturbed = pi + eps * d * pi.min()
        assert np.all(perturbed > 0)
        assert np.allclose(features.T @ perturbed, features.T @ pi, atol=1e-14)
        assert -np.sum(perturbed * np.log(perturbed)) < exact.entropy


def test_heat_bath_kernel_detailed_balance():
    params = JungleParams(alpha=[-0.5, 0.2, -1.1], beta={(0, 1): 0.7, (1, 2): -0.6, (0, 2): 0.3})
    exact = enumerate_exact(params)
    pi = np.exp(state_log_weights(params) - exact.log_z)
    for site in range(3):
        kernel = site_kernel(params, site)
        assert np.allclose(kernel.sum(axis=1), 1.0, atol=1e-14)
        flow = pi[:, None] * kernel
        assert np.max(np.abs(flow - flow.T)) < 1e-10
    sweep = sweep_kernel(params)
    assert np.max(np.abs(pi @ sweep - pi)) < 1e-10


def test_constant_recovery_equals_loss_count():
    params = JungleParams(alpha=[-1.0] * 6, beta={(0, 1): 0.4})
    samples = gibbs_sample(params, McmcConfig(chains=2, walkers=10, draws=50, burn_in=10, thin=1, seed=3))
    spec = PortfolioSpec(n=6, p=[0.3] * 6, rho={(0, 1): 0.05})
    losses = losses_from_states(samples, spec)
    assert np.array_equal(losses.losses, samples.loss_counts.astype(float))
    assert np.all(losses.losses >= 0)


def test_exposure_weighted_losses_by_enumeration():
    params = JungleParams(alpha=[0.0, 0.0])
    spec = PortfolioSpec(n=2, p=[0.5, 0.5], exposure=[1.0, 3.0])
    support, probabilities = monetary_pmf_exact(params, spec)
    assert list(support) == [0.0, 1.0, 3.0, 4.0]
    assert np.allclose(probabilities, 0.25, atol=1e-15)


def test_borrower_specific_recovery_by_enumeration():
    params = JungleParams(alpha=[0.0, 0.0])
    recovery = BorrowerSpecificRecovery(a=[0.2, 0.5], b=[0.4, 0.0])
    spec = PortfolioSpec(n=2, p=[0.5, 0.5], recovery=recovery)
    support, probabilities = monetary_pmf_exact(params, spec)
    # one default: rate 0.5; both: rate 1.0
    assert np.allclose(support, [0.0, 0.4, 0.5, 1.1], atol=1e-12)
    assert np.allclose(probabilities, 0.25, atol=1e-15)


def test_linear_in_aggregate_expected_lgd_is_one():
    params, spec = dandelion_portfolio(20, 0.1, 0.2, LinearInAggregateRecovery())
    config = McmcConfig(chains=4, walkers=500, draws=200, burn_in=200, thin=5, seed=99)
    samples = gibbs_sample(params.to_jungle(), config)
    losses = losses_from_states(samples, spec)
    per_walker = losses.lgd_factors.reshape(config.chains, config.draws, config.walkers).mean(axis=1).ravel()
    se = per_walker.std(ddof=1) / math.sqrt(per_walker.size)
    assert abs(per_walker.mean() - 1.0) < 3 * se
    assert np.all(losses.losses >= 0)


def test_state_dependent_recovery_fattens_the_tail():
    params, spec = dandelion_portfolio(10, 0.1, 0.2, LinearInAggregateRecovery())
    support, prob = monetary_pmf_exact(params.to_jungle(), spec)
    counts, count_prob = monetary_pmf_exact(params.to_jungle(), spec.model_copy(update={"recovery": ConstantRecovery()}))
    scale = float(support @ prob) / float(counts @ count_prob)

    def quantile(values, probabilities, c):
        return values[np.searchsorted(np.cumsum(probabilities), c - 1e-12)]

    assert quantile(support, prob, 0.999) > scale * quantile(counts, count_prob, 0.999)


def test_central_node_recovery_uses_the_hub():
    params, spec = dandelion_portfolio(4, 0.2, 0.3, CentralNodeRecovery(a=0.2, b=0.6))
    support, prob = monetary_pmf_exact(params.to_jungle(), spec)
    assert abs(prob.sum() - 1.0) < 1e-12
    # hub solvent: 0.2 per default; hub defaulted: 0.8 per default, hub included
    assert 0.2 in np.round(support, 12) and 4.0 in np.round(support, 12)


def test_central_node_recovery_without_hub_fails():
    spec = PortfolioSpec(n=3, p=[0.1] * 3, recovery=CentralNodeRecovery(a=0.5, b=0.5))
    try:
        monetary_pmf_exact(JungleParams(alpha=[-2.0] * 3), spec)
    except ConfigurationError:
        return
    raise AssertionError("central_node recovery without a hub should fail")


def main():
    """Run all tests"""
    print("🧪 Sampler tests")
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
