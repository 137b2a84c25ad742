from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from partialbayes.polyatree import (
    PtParams,
    PtRealization,
    SymmPtDensity,
    cell_index,
    default_alpha,
    leaf_index,
    logpdf_symm,
    mean_realization,
    posterior_update,
    quantile_grid,
    sample_prior,
    second_moment,
    write_density_csv,
)
from partialbayes.statdist import FoldedStdT8

PARAMS = PtParams()


def _quad_halfline(fun, depth=8):
    """Integrate a piecewise-smooth function cell by cell on the base partition."""
    edges = quantile_grid(depth).edges
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        total += integrate.quad(fun, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    return total


# ---------------------------------------------------------------- alpha table

def test_default_alpha_values():
    assert default_alpha(3, 2, 8) == 180.0
    assert default_alpha(8, 255, 8) == 0.1
    assert default_alpha(8, 256, 8) == 0.1
    assert default_alpha(1, 1, 8) == 0.1
    assert default_alpha(8, 254, 8) == 20.0 * 64


@pytest.mark.parametrize("j,l", [(0, 1), (9, 1), (2, 5), (2, 0)])
def test_default_alpha_rejects_out_of_range(j, l):
    with pytest.raises(ValueError):
        default_alpha(j, l, 8)


def test_params_validation():
    with pytest.raises(ValueError):
        PtParams(depth=2, alpha=(np.ones(2),))
    with pytest.raises(ValueError):
        PtParams(depth=1, alpha=(np.array([1.0, 0.0]),))


# ---------------------------------------------------------------- indexing

def test_leaf_index_examples():
    base = FoldedStdT8()
    assert leaf_index(3, 0.0) == 1
    assert leaf_index(3, np.inf) == 8
    assert leaf_index(1, float(base.quantile(0.5))) == 2
    with pytest.raises(ValueError):
        leaf_index(2, -0.1)


def test_cell_index_agrees_with_leaf_index():
    x = np.abs(np.random.default_rng(0).standard_t(3, size=2000)) * 2
    np.testing.assert_array_equal(cell_index(x, 8) + 1, leaf_index(8, x))


# ---------------------------------------------------------------- prior draws

def test_pairing_is_exact():
    real = sample_prior(PARAMS, np.random.default_rng(1))
    for b in real.beta:
        assert np.all(b[0::2] + b[1::2] == 1.0)
        assert np.all(b > 0)


@pytest.mark.parametrize("seed", [2, 3, 4])
def test_prior_draw_normalized_by_quadrature(seed):
    real = sample_prior(PARAMS, np.random.default_rng(seed))
    mass = _quad_halfline(lambda x: math.exp(real.log_halfline_pdf(x)))
    assert abs(mass - 1.0) < 1e-6
    assert abs(np.exp(real.leaf_log_weight).sum() / 256 - 1.0) < 1e-10


def test_flat_realization_is_base():
    base = FoldedStdT8()
    x = np.array([0.0, 0.3, 1.0, 5.0, 40.0])
    np.testing.assert_allclose(PtRealization.flat().log_halfline_pdf(x), base.logpdf(x), rtol=1e-12)


# ---------------------------------------------------------------- symmetrized density

def test_symmetry_exact():
    w = SymmPtDensity(sample_prior(PARAMS, np.random.default_rng(5)), 1.7)
    for x in (0.3, 1.0, 5.0):
        assert logpdf_symm(w, x) == logpdf_symm(w, -x)


def test_flat_symmetrized_logpdf():
    w = SymmPtDensity(PtRealization.flat())
    base = FoldedStdT8()
    for x in (-2.0, 0.0, 0.7):
        assert logpdf_symm(w, x) == pytest.approx(float(base.logpdf(abs(x))) - math.log(2), rel=1e-12)


def test_symmetrized_integrates_to_one():
    w = SymmPtDensity(sample_prior(PARAMS, np.random.default_rng(6)), 0.6)
    half = _quad_halfline(lambda x: float(w.pdf(0.6 * x)) * 0.6)
    assert abs(2 * half - 1.0) < 1e-6


# ---------------------------------------------------------------- posterior update

def test_posterior_update_counting():
    assert all(np.array_equal(a, b) for a, b in zip(posterior_update(PARAMS, []).alpha, PARAMS.alpha))
    one = posterior_update(PARAMS, [0.8])
    for a, b in zip(one.alpha, PARAMS.alpha):
        diff = a - b
        assert np.count_nonzero(diff) == 1 and diff.sum() == 1.0
    with pytest.raises(ValueError):
        posterior_update(PARAMS, [-1.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1e6), max_size=60))
def test_posterior_update_level_totals(data):
    post = posterior_update(PARAMS, data)
    for a, b in zip(post.alpha, PARAMS.alpha):
        assert abs((a - b).sum() - len(data)) < 1e-9


def test_posterior_update_child_increments_nest():
    post = posterior_update(PARAMS, np.abs(np.random.default_rng(7).normal(size=300)))
    inc = [a - b for a, b in zip(post.alpha, PARAMS.alpha)]
    for j in range(1, len(inc)):
        np.testing.assert_array_equal(inc[j][0::2] + inc[j][1::2], inc[j - 1])


# ---------------------------------------------------------------- second moment

def test_flat_second_moment_is_one():
    assert abs(second_moment(PtRealization.flat()) - 1.0) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_second_moment_against_quadrature(seed):
    real = sample_prior(PARAMS, np.random.default_rng(100 + seed))
    m2 = _quad_halfline(lambda x: x * x * math.exp(real.log_halfline_pdf(x)))
    assert abs(second_moment(real) - m2) < 1e-8


def test_rescaled_second_moment_exact():
    w = SymmPtDensity(sample_prior(PARAMS, np.random.default_rng(8)))
    assert w.rescaled(2.0).second_moment == 4.0 * w.second_moment
    assert w.standardized().second_moment == pytest.approx(1.0, abs=1e-14)


def test_rescaled_density_change_of_variables():
    w = SymmPtDensity(sample_prior(PARAMS, np.random.default_rng(9)))
    x = np.array([-1.3, 0.2, 3.0])
    np.testing.assert_allclose(w.rescaled(3.0).pdf(x), w.pdf(x / 3.0) / 3.0, rtol=1e-13)


# ---------------------------------------------------------------- prior mean

def test_prior_mean_density_matches_base_on_balanced_cells():
    rng = np.random.default_rng(10)
    J = PARAMS.depth
    grid = np.array([0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 1.0, 1.2, 1.4, 1.6])
    leaves = cell_index(grid, J)
    # keep points whose whole path only crosses splits with equal alphas
    balanced = np.ones(grid.size, dtype=bool)
    for j, a in enumerate(PARAMS.alpha, start=1):
        node = leaves >> (J - j)
        sib = node ^ 1
        balanced &= a[node] == a[sib]
    assert balanced.sum() >= 8
    draws = np.array([sample_prior(PARAMS, rng).log_halfline_pdf(grid) for _ in range(10_000)])
    dens = np.exp(draws)
    mean, se = dens.mean(axis=0), dens.std(axis=0) / math.sqrt(dens.shape[0])
    base = np.exp(FoldedStdT8().logpdf(grid))
    assert np.all(np.abs(mean - base)[balanced] < 3 * se[balanced] + 1e-12)
    # the analytic mean density agrees with the Monte Carlo average everywhere
    analytic = np.exp(mean_realization(PARAMS).log_halfline_pdf(grid))
    assert np.all(np.abs(mean - analytic) < 4 * se)


def test_density_csv(tmp_path):
    w = SymmPtDensity(PtRealization.flat())
    path = tmp_path / "d.csv"
    write_density_csv(path, w, [-1.0, 0.0, 1.0])
    rows = path.read_text().splitlines()
    assert rows[0] == "x,pdf"
    assert len(rows) == 4
    assert float(rows[1].split(",")[1]) == float(rows[3].split(",")[1])
