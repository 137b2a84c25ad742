from __future__ import annotations

import math

import numpy as np
import pytest

from partialbayes.boundary import (
    boundary_grid,
    fit_boundary,
    null_quantile_thresholds,
    predict,
    write_boundary_csv,
)
from partialbayes.dpmm import DpPrior, run_conjugate_chain
from partialbayes.statdist import std_normal_cdf


# ---------------------------------------------------------------- thresholds

def test_symmetric_integer_draws():
    draws = np.concatenate([np.arange(1, 101), -np.arange(1, 101)]).astype(float)
    # sorted |draws| is 1,1,2,2,...,100,100; type-7 position 0.95 * 199 = 189.05
    srt = np.sort(np.abs(draws))
    oracle = srt[189] + 0.05 * (srt[190] - srt[189])
    got = null_quantile_thresholds(draws[None, :], 0.05)[0]
    assert got == pytest.approx(oracle) and got == pytest.approx(95.05)


def test_threshold_degenerate_cases():
    assert null_quantile_thresholds(np.zeros((2, 50)), 0.05).tolist() == [0.0, 0.0]
    draws = np.random.default_rng(0).normal(size=(3, 40))
    np.testing.assert_array_equal(null_quantile_thresholds(draws, 1.0), np.abs(draws).min(axis=1))
    with pytest.raises(ValueError):
        null_quantile_thresholds(np.zeros((1, 19)), 0.05)


# ---------------------------------------------------------------- smoother

def _wls_oracle(x, y, h, x0):
    """Local-linear value at x0 by an explicit weighted least-squares solve."""
    w = np.sqrt(np.exp(-0.5 * ((x - x0) / h) ** 2))
    A = np.column_stack([np.ones_like(x), x - x0]) * w[:, None]
    coef, *_ = np.linalg.lstsq(A, y * w, rcond=None)
    return coef[0]


def test_constant_thresholds():
    v = np.exp(np.random.default_rng(1).normal(size=50))
    fit = fit_boundary(v, np.full(50, 2.5), 0.05)
    grid = np.linspace(v.min(), v.max(), 30)
    assert np.all(np.abs(predict(fit, grid) - 2.5) < 1e-8)


def test_linear_in_log_v_recovered():
    v = np.exp(np.linspace(-2, 2, 80))
    y = 3.0 + 0.7 * np.log(v)
    fit = fit_boundary(v, y, 0.05)
    inner = np.exp(np.linspace(-1.5, 1.5, 13))
    np.testing.assert_allclose(predict(fit, inner), 3.0 + 0.7 * np.log(inner), atol=1e-3)


def test_interior_matches_refit_oracle():
    rng = np.random.default_rng(2)
    v = np.exp(rng.normal(size=60))
    y = 2 + np.sin(np.log(v)) + 0.1 * rng.normal(size=60)
    fit = fit_boundary(v, y, 0.05)
    for v0 in np.quantile(v, [0.2, 0.5, 0.8]):
        assert predict(fit, v0) == pytest.approx(_wls_oracle(np.log(v), y, fit.bandwidth, math.log(v0)), abs=1e-8)


def test_duplicates_enter_through_their_average():
    rng = np.random.default_rng(3)
    v = np.exp(rng.normal(size=30))
    v[5] = v[6]
    y = 1 + rng.random(30)
    y2 = y.copy()
    y2[5] = y2[6] = 0.5 * (y[5] + y[6])
    a = predict(fit_boundary(v, y, 0.05), v[5])
    b = predict(fit_boundary(v, y2, 0.05), v[5])
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(_wls_oracle(np.log(v), y, fit_boundary(v, y, 0.05).bandwidth, math.log(v[5])), abs=1e-10)


def test_clamped_extrapolation_and_nonnegativity():
    v = np.exp(np.linspace(0, 3, 40))
    fit = fit_boundary(v, 5.0 - 2.0 * np.log(v), 0.05)
    assert predict(fit, 1e9) == predict(fit, v.max())
    assert predict(fit, 1e-9) == predict(fit, v.min())
    assert np.all(predict(fit, v) >= 0)
    assert np.all(fit.knots[:, 1] >= 0)


def test_shifted_log_fallback_and_errors():
    v = np.linspace(-1, 1, 20)
    fit = fit_boundary(v, np.full(20, 1.0), 0.05)
    assert fit.shift == pytest.approx(0.02)
    assert predict(fit, 0.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        fit_boundary(np.ones(9), np.ones(9), 0.05)
    with pytest.raises(ValueError):
        fit_boundary(np.ones(10), np.ones(11), 0.05)


def test_boundary_csv(tmp_path):
    v = np.exp(np.linspace(-1, 1, 20))
    fit = fit_boundary(v, np.log(v) + 2, 0.05)
    path = tmp_path / "b.csv"
    write_boundary_csv(path, fit)
    lines = path.read_text().splitlines()
    assert lines[0] == "v,threshold" and len(lines) == 201
    g = boundary_grid(fit)
    assert g[0] == pytest.approx(v.min()) and g[-1] == pytest.approx(v.max())


# ---------------------------------------------------------------- consistency with p-values

def test_boundary_agrees_with_pvalues_on_normal_model():
    rng = np.random.default_rng(4)
    n, K, alpha = 1000, 6, 0.05
    sigma2 = rng.choice([0.5, 1.0, 3.0], size=n)
    z = rng.normal(size=(n, K)) * np.sqrt(sigma2)[:, None]
    z[:100] += 2.0 * np.sqrt(sigma2[:100])[:, None]
    t = z.mean(axis=1) * math.sqrt(K)
    s2 = z.var(axis=1, ddof=1)
    res = run_conjugate_chain(s2, K, DpPrior(), 500, 2000, np.random.default_rng(5), keep_draws=True)
    sig = np.sqrt(res.sigma2_draws)  # (B, n)
    p = (2.0 * std_normal_cdf(-np.abs(t)[None, :] / sig)).mean(axis=0)
    null = (sig * np.random.default_rng(6).standard_normal(sig.shape)).T
    fit = fit_boundary(s2, null_quantile_thresholds(null, alpha), alpha)
    by_boundary = np.abs(t) >= predict(fit, s2)
    assert np.mean(by_boundary != (p <= alpha)) < 0.02
