from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from _oracles import (
    concentration_conditional_cdf,
    ks_distance_to_grid,
    marginal_by_quadrature,
    two_unit_together_prob,
)
from partialbayes.dpmm import (
    DIAGNOSTIC_COLUMNS,
    DpPrior,
    DpState,
    calibrate_base,
    escobar_west_params,
    floor_s2,
    new_cluster_marginal_loglik,
    resample_cluster_params,
    resolve_prior,
    run_conjugate_chain,
    sweep_aux,
    sweep_conjugate,
    update_concentration,
)
from partialbayes.statdist import ScaledInvChiSq, sample_variance_loglik


# ---------------------------------------------------------------- calibration

@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1e3), st.floats(1.5, 1e3))
def test_calibrate_base_quantiles(lo, ratio):
    base = calibrate_base(lo, lo * ratio)
    if 0.5 < base.nu < 500:
        assert base.quantile(0.01) == pytest.approx(lo, rel=1e-6)
        assert base.quantile(0.99) == pytest.approx(lo * ratio, rel=1e-6)


def test_calibrate_base_scale_equivariance():
    a = calibrate_base(0.3, 4.0)
    b = calibrate_base(0.3 * 7.5, 4.0 * 7.5)
    assert b.nu == pytest.approx(a.nu, rel=1e-10)
    assert b.sigma2 == pytest.approx(7.5 * a.sigma2, rel=1e-10)


def test_calibrate_base_narrow_spread_caps_nu():
    assert calibrate_base(1.0, 1.0 + 1e-6).nu == 500.0
    assert calibrate_base(1.0, 1.01).nu == 500.0
    wide = calibrate_base(1.0, 1e12)
    assert wide.nu == 0.5
    with pytest.raises(ValueError):
        calibrate_base(2.0, 2.0)


def test_floor_and_resolve():
    s2, mask = floor_s2(np.array([0.0, 1.0, 2.0, 3.0]))
    assert mask.tolist() == [True, False, False, False]
    assert s2[0] == pytest.approx(1.5e-8)
    prior = resolve_prior(DpPrior(), np.full(5, 2.0))
    assert prior.base.nu == 500.0 and prior.base.sigma2 == 2.0
    explicit = DpPrior(base=ScaledInvChiSq(3.0, 1.0))
    assert resolve_prior(explicit, np.ones(3)) is explicit
    with pytest.raises(ValueError):
        DpPrior(gamma_shape=0.0)


# ---------------------------------------------------------------- marginal

def test_marginal_against_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s2 = float(np.exp(rng.uniform(-2, 2)))
        nu = float(np.exp(rng.uniform(np.log(0.7), np.log(60))))
        sig = float(np.exp(rng.uniform(-1.5, 1.5)))
        K = int(rng.integers(2, 15))
        got = new_cluster_marginal_loglik(s2, K, ScaledInvChiSq(nu, sig))
        assert abs(got - marginal_by_quadrature([s2], K, nu, sig)) < 1e-8


@pytest.mark.parametrize("K", [2, 3, 6])
def test_marginal_integrates_to_one(K):
    base = ScaledInvChiSq(5.0, 1.2)
    total = integrate.quad(lambda s: math.exp(new_cluster_marginal_loglik(s, K, base)), 0, np.inf, limit=200)[0]
    assert abs(total - 1.0) < 1e-6


def test_marginal_large_nu_limit():
    for s2 in (0.4, 1.0, 2.5):
        got = new_cluster_marginal_loglik(s2, 8, ScaledInvChiSq(1e6, 1.3))
        assert abs(got - sample_variance_loglik(s2, 1.3, 8)) < 1e-3


def test_marginal_rejects_small_k():
    with pytest.raises(ValueError):
        new_cluster_marginal_loglik(1.0, 1, ScaledInvChiSq(3.0, 1.0))


# ---------------------------------------------------------------- conjugate sweep

BASE = ScaledInvChiSq(4.0, 1.0)
PRIOR = DpPrior(base=BASE)


def test_single_unit_is_singleton():
    rng = np.random.default_rng(1)
    st_ = DpState.single_cluster(1)
    for _ in range(50):
        sweep_conjugate(st_, [1.3], 5, PRIOR, rng)
        assert st_.n_clusters == 1 and st_.assignments[0] == 0


def test_state_invariants_after_sweeps():
    rng = np.random.default_rng(2)
    s2 = rng.chisquare(5, size=200) / 5 * rng.choice([0.5, 4.0], size=200)
    st_ = DpState.single_cluster(200, concentration=2.0)
    for _ in range(30):
        sweep_conjugate(st_, s2, 6, PRIOR, rng)
        st_.check()
        assert st_.sizes.sum() == 200
    relabeled = st_.canonical()
    relabeled.check()
    np.testing.assert_array_equal(relabeled.unit_sigma2(), st_.unit_sigma2())


def test_check_rejects_inconsistent_state():
    with pytest.raises(ValueError):
        DpState(np.array([0, 2]), np.array([1.0, 2.0, 3.0]), 1.0).check()
    with pytest.raises(ValueError):
        DpState(np.array([0, 3]), np.array([1.0, 2.0]), 1.0).check()
    with pytest.raises(ValueError):
        DpState(np.array([0]), np.array([1.0]), 0.0).check()


def test_empty_data_posterior_is_prior():
    # K = 1 carries no variance information, so the conditional is the base itself
    rng = np.random.default_rng(3)
    draws = np.array([resample_cluster_params(DpState.single_cluster(1), [5.0], [1], BASE, rng).sigma2[0]
                      for _ in range(5000)])
    assert stats.kstest(draws, BASE.cdf).pvalue > 0.001


def _together_freq(sweep, sweeps, seed):
    rng = np.random.default_rng(seed)
    st_ = DpState(np.array([0, 1]), np.array([1.0, 1.0]), 1.0)
    together = 0
    for _ in range(sweeps):
        sweep(st_, rng)
        together += st_.n_clusters == 1
    return together / sweeps


S2_PAIR, K_PAIR = np.array([0.5, 2.0]), 3


def test_two_unit_conjugate_matches_enumeration():
    oracle = two_unit_together_prob(0.5, 2.0, K_PAIR, BASE.nu, BASE.sigma2, 1.0)
    freq = _together_freq(lambda s, r: sweep_conjugate(s, S2_PAIR, K_PAIR, PRIOR, r), 30_000, 4)
    assert abs(freq - oracle) < 0.02


def _conjugate_unit_loglik(i, v):
    d = K_PAIR - 1
    x = d * S2_PAIR[i] / v
    return (0.5 * d - 1) * math.log(x) - 0.5 * x - 0.5 * d * math.log(2) - math.lgamma(0.5 * d) + math.log(d / v)


def test_two_unit_aux_matches_enumeration():
    oracle = two_unit_together_prob(0.5, 2.0, K_PAIR, BASE.nu, BASE.sigma2, 1.0)

    def step(s, r):
        sweep_aux(s, _conjugate_unit_loglik, PRIOR, r)
        resample_cluster_params(s, S2_PAIR, K_PAIR, BASE, r)

    freq = _together_freq(step, 20_000, 5)
    assert abs(freq - oracle) < 0.02


# ---------------------------------------------------------------- auxiliary sweep

def test_aux_constant_likelihood_uses_size_and_c_over_m_weights():
    # with c = 2 and a flat likelihood each unit joins the other with prob 1 / (1 + c)
    rng = np.random.default_rng(6)
    together = 0
    reps = 20_000
    for _ in range(reps):
        st_ = DpState(np.array([0, 0]), np.array([1.0]), 2.0)
        sweep_aux(st_, lambda i, v: 0.0, PRIOR, rng)
        together += st_.n_clusters == 1
    p = together / reps
    assert abs(p - 1 / 3) < 4 * math.sqrt(2 / 9 / reps)


def test_aux_singleton_reuses_own_value_once():
    calls = []

    def ll(i, v):
        if i == 0:
            calls.append(v)
        return 0.0

    st_ = DpState(np.array([0, 1]), np.array([7.77, 1.0]), 1.0)
    sweep_aux(st_, ll, DpPrior(base=BASE, m_aux=10), np.random.default_rng(7))
    assert len(calls) == 11
    assert calls.count(7.77) == 1
    assert calls[1] == 7.77  # first auxiliary slot, after the one occupied cluster


def test_aux_rejects_nan_loglik():
    with pytest.raises(FloatingPointError):
        sweep_aux(DpState.single_cluster(2), lambda i, v: float("nan"), PRIOR, np.random.default_rng(0))


# ---------------------------------------------------------------- concentration

def test_escobar_west_limits():
    w, bstar = escobar_west_params(1.0, 3, 10, 0.001, 100.0)
    assert bstar == 100.0
    w, _ = escobar_west_params(1.0, 3, 1, 0.001, 1e300)
    assert w == pytest.approx(1.0)


def test_concentration_conditional_by_ks():
    k, n = 3, 50
    prior = DpPrior(base=BASE)
    st_ = DpState(np.arange(n) % k, np.ones(k), 1.0)
    rng = np.random.default_rng(8)
    draws = np.array([update_concentration(st_, n, prior, rng) for _ in range(100_000)])
    x, F = concentration_conditional_cdf(k, n, prior.gamma_shape, prior.gamma_scale)
    assert ks_distance_to_grid(draws, x, F) < 0.02


def test_concentration_rejects_empty():
    with pytest.raises(ValueError):
        update_concentration(DpState.single_cluster(1), 0, PRIOR, np.random.default_rng(0))


# ---------------------------------------------------------------- chain driver

def test_chain_reproducible_and_diagnostics():
    rng_data = np.random.default_rng(9)
    s2 = rng_data.chisquare(5, size=100) / 5
    a = run_conjugate_chain(s2, 6, DpPrior(), 20, 30, np.random.default_rng(10), keep_draws=True)
    b = run_conjugate_chain(s2, 6, DpPrior(), 20, 30, np.random.default_rng(10), keep_draws=True)
    np.testing.assert_array_equal(a.sigma2_draws, b.sigma2_draws)
    assert a.sigma2_draws.shape == (30, 100)
    assert len(a.diagnostics) == 50 and len(a.diagnostics[0]) == len(DIAGNOSTIC_COLUMNS)
    seen = []
    run_conjugate_chain(s2, 6, DpPrior(), 5, 7, np.random.default_rng(10), on_draw=lambda s: seen.append(s.n_clusters))
    assert len(seen) == 7


def test_chain_recovers_two_variance_groups():
    rng = np.random.default_rng(11)
    sig = np.repeat([0.5, 4.0], 150)
    s2 = sig * rng.chisquare(11, size=300) / 11
    res = run_conjugate_chain(s2, 12, DpPrior(), 200, 300, np.random.default_rng(12), keep_draws=True)
    post = res.sigma2_draws.mean(axis=0)
    assert abs(np.median(post[:150]) - 0.5) < 0.1
    assert abs(np.median(post[150:]) - 4.0) < 0.6
