"""Joint sampler for the noise shape (symmetrized Polya tree) and the
cluster-shared scales (Dirichlet process), with null imputation of the
sample means.

One iteration runs, in order:

1. auxiliary-parameter reassignment of every unit,
2. independence Metropolis-Hastings on each cluster variance,
3. independence Metropolis-Hastings on each imputed null mean,
4. the concentration update,
5. a conjugate Polya-tree refresh from the rescaled imputed data.

The standardized noise density is rebuilt only after step 5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numba
import numpy as np
from scipy import special

from .dpmm import (
    DpPrior,
    DpState,
    _categorical,
    _drop_cluster,
    floor_s2,
    resolve_prior,
    run_conjugate_chain,
    sweep_aux,
    update_concentration,
)
from .polyatree import (
    PtParams,
    SymmPtDensity,
    _T8_LOGCONST,
    posterior_update,
    quantile_grid,
    sample_prior,
)
from .statdist import LOG2, T8_DF, T8_SCALE, ScaledInvChiSq

GL_NODES = 64
_gl_x, _gl_w = np.polynomial.legendre.leggauss(GL_NODES)
GL_U = 0.5 * (_gl_x + 1.0)
GL_LOGW = np.log(0.5 * _gl_w)
SCALE_MIX_DF = 5.0
IMPUTE_DF = 5.0


@dataclass(frozen=True)
class PolyaChainConfig:
    burnin: int = 2000
    iters: int = 10000
    mh_steps: int = 3
    m_aux: int = 10
    seed: int = 0
    normal_burnin: int = 5000
    normal_iters: int = 10000
    shape_scale: str = "anchored"

    def __post_init__(self):
        if self.shape_scale not in SHAPE_SCALES:
            raise ValueError(f"shape_scale must be one of {sorted(SHAPE_SCALES)}")
        for name in ("burnin", "iters", "mh_steps", "m_aux", "normal_burnin", "normal_iters"):
            if getattr(self, name) < 0 or (name in ("iters", "mh_steps", "m_aux") and getattr(self, name) < 1):
                raise ValueError(f"{name} must be positive")


#: How the shape refresh rescales the imputed data.  ``"literal"`` multiplies
#: by ``sqrt(m2(W)) / sigma``, which leaves the raw scale of ``W`` free to
#: wander; ``"anchored"`` divides by ``sigma`` only, pinning ``m2(W)`` near one.
SHAPE_SCALES = frozenset({"anchored", "literal"})


@dataclass
class PolyaChainState:
    dp: DpState
    pt: SymmPtDensity
    zbar_null: np.ndarray
    std_pt: SymmPtDensity = None
    shape_override: object = None

    def __post_init__(self):
        if self.std_pt is None:
            self.refresh_standardized()

    def refresh_standardized(self):
        self.std_pt = self.pt.standardized()

    @property
    def shape(self):
        """Noise density used by the likelihood: the standardized tree unless pinned."""
        return PtShape(self.std_pt) if self.shape_override is None else self.shape_override

    def check(self):
        self.dp.check()
        if not np.all(np.isfinite(self.zbar_null)):
            raise ValueError("non-finite imputed mean")
        if abs(self.std_pt.second_moment - 1.0) > 1e-10:
            raise ValueError("standardized density lost unit variance")


@dataclass
class PolyaChainResult:
    zbar_null: np.ndarray
    sigma2: np.ndarray
    diagnostics: list
    state: PolyaChainState
    prior: DpPrior


DIAGNOSTIC_COLUMNS = (
    "iteration",
    "k_clusters",
    "concentration",
    "pt_second_moment",
    "mh_accept_scale",
    "mh_accept_impute",
)


# --------------------------------------------------------------------------
# likelihood of data under the standardized density


def log_std_density_sum(std_pt: SymmPtDensity, x: np.ndarray, axis=-1) -> np.ndarray:
    return std_pt.logpdf(x).sum(axis=axis)


def unit_logliks(std_pt: SymmPtDensity, data: np.ndarray, sigma2) -> np.ndarray:
    """``-K/2 log sigma2 + sum_j log w((data_ij) / sigma)`` for each row."""
    data = np.atleast_2d(data)
    return PtShape(std_pt).rows_loglik(data, np.sqrt(np.asarray(sigma2, dtype=float)))


@numba.njit(cache=True, inline="always")
def _row_logw(row, sig, inner, guide, step, llw, scale):
    """Sum over a row of ``log w_std(row_j / sig)`` without the constant part.

    Cells are found through ``guide`` (a uniform-grid index into the sorted
    edges); the t8 kernel terms are multiplied together so that a row costs a
    single logarithm.
    """
    inv = 1.0 / (sig * scale)
    a = T8_SCALE * T8_SCALE / T8_DF
    last = inner[inner.size - 1]
    acc = 0.0
    tail = 0.0
    prod = 1.0
    for j in range(row.size):
        r = abs(row[j]) * inv
        if r >= last:
            idx = inner.size
        else:
            idx = guide[int(r / step)]
            while r >= inner[idx]:
                idx += 1
        acc += llw[idx]
        if r > 1e50:
            tail += math.log(a) + 2.0 * math.log(r)
            continue
        prod *= 1.0 + a * r * r
        if prod > 1e200:
            tail += math.log(prod)
            prod = 1.0
    return acc - 0.5 * (T8_DF + 1.0) * (tail + math.log(prod))


@numba.njit(cache=True)
def _unit_loglik(row, sigma2, inner, guide, step, llw, scale):
    sig = math.sqrt(sigma2)
    K = row.size
    acc = _row_logw(row, sig, inner, guide, step, llw, scale)
    return acc + K * (_T8_LOGCONST - LOG2 - math.log(scale)) - K * math.log(sig)


@numba.njit(cache=True)
def _rows_loglik(data, sig, inner, guide, step, llw, scale):
    n, K = data.shape
    out = np.empty(n)
    const = K * (_T8_LOGCONST - LOG2 - math.log(scale))
    for i in range(n):
        out[i] = _row_logw(data[i], sig[i], inner, guide, step, llw, scale) + const - K * math.log(sig[i])
    return out


class PtShape:
    """Standardized Polya-tree noise density, evaluated by compiled kernels."""

    def __init__(self, std: SymmPtDensity):
        grid = quantile_grid(std.realization.depth)
        self.args = (
            np.asarray(grid.inner),
            np.asarray(grid.guide),
            grid.guide_step,
            np.asarray(std.realization.leaf_log_weight),
            std.scale,
        )

    def rows_loglik(self, data, sigma):
        """Per-row ``-K log sigma_i + sum_j log w_std(data_ij / sigma_i)``."""
        data = np.ascontiguousarray(data, dtype=float)
        sigma = np.ascontiguousarray(np.broadcast_to(sigma, data.shape[:1]), dtype=float)
        return _rows_loglik(data, sigma, *self.args)


class NormalShape:
    """Standard normal noise density; used to pin the shape in checks."""

    def rows_loglik(self, data, sigma):
        data = np.asarray(data, dtype=float)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), data.shape[:1])
        K = data.shape[1]
        r = data / sigma[:, None]
        return -K * np.log(sigma) - 0.5 * K * math.log(2.0 * math.pi) - 0.5 * np.einsum("ij,ij->i", r, r)


@numba.njit(cache=True)
def _polya_assign_kernel(assign, sig2, sizes, nclus, data, aux, u, log_cm, inner, guide, step, llw, scale):
    n = assign.size
    m = aux.shape[1]
    logw = np.empty(n + m)
    phi = np.empty(m)
    for i in range(n):
        c = assign[i]
        sizes[c] -= 1
        for j in range(m):
            phi[j] = aux[i, j]
        if sizes[c] == 0:
            phi[0] = sig2[c]
            nclus = _drop_cluster(c, nclus, assign, sig2, sizes)
        row = data[i]
        for j in range(nclus):
            logw[j] = math.log(sizes[j]) + _unit_loglik(row, sig2[j], inner, guide, step, llw, scale)
        for j in range(m):
            logw[nclus + j] = log_cm + _unit_loglik(row, phi[j], inner, guide, step, llw, scale)
        pick = _categorical(logw, nclus + m, u[i])
        if pick >= nclus:
            sig2[nclus] = phi[pick - nclus]
            sizes[nclus] = 1
            pick = nclus
            nclus += 1
        else:
            sizes[pick] += 1
        assign[i] = pick
    return nclus


# --------------------------------------------------------------------------
# the five steps


def imputed_data(state: PolyaChainState, resid: np.ndarray) -> np.ndarray:
    return resid + state.zbar_null[:, None]


def init_from_normal_run(normal_state: DpState, n: int, pt_params: PtParams, rng: np.random.Generator) -> PolyaChainState:
    """Copy the terminal normal-model clustering, zero the imputed means and
    draw the noise shape from its prior."""
    if normal_state.n != n:
        raise ValueError("normal-model state has the wrong number of units")
    pt = SymmPtDensity(sample_prior(pt_params, rng))
    return PolyaChainState(normal_state.copy(), pt, np.zeros(n))


def update_assignments(state: PolyaChainState, resid: np.ndarray, prior: DpPrior, rng: np.random.Generator, m_aux: int = 10):
    """Auxiliary-parameter reassignment under the current standardized shape."""
    dp = state.dp
    n = dp.n
    shape = state.shape
    if not isinstance(shape, PtShape):
        data = imputed_data(state, resid)

        def unit_loglik(i, sigma2):
            return float(shape.rows_loglik(data[i : i + 1], math.sqrt(sigma2))[0])

        sweep_aux(dp, unit_loglik, replace(prior, m_aux=m_aux), rng)
        return state
    aux = prior.base.sample(rng, size=(n, m_aux))
    u = rng.random(n)
    sig2 = np.empty(n + 1)
    sig2[: dp.n_clusters] = dp.sigma2
    sizes = np.zeros(n + 1, dtype=np.int64)
    sizes[: dp.n_clusters] = dp.sizes
    assign = dp.assignments.copy()
    nclus = _polya_assign_kernel(
        assign, sig2, sizes, dp.n_clusters, np.ascontiguousarray(imputed_data(state, resid)), aux, u,
        math.log(dp.concentration / m_aux), *shape.args,
    )
    if not np.all(np.isfinite(sig2[:nclus])):
        raise FloatingPointError("non-finite cluster variance after reassignment")
    dp.assignments = assign
    dp.sigma2 = sig2[:nclus].copy()
    return state


def scale_proposal_logpdf(s, nu_post: float, scale_post: float) -> np.ndarray:
    """log-density of ``X * Y`` with ``X ~ ScaledInvChiSq(nu_post, scale_post)``
    and ``Y ~ chi2_5 / 5``, by 64-node Gauss-Legendre quadrature.

    The quadrature runs over the quantiles of the narrower factor, so the
    integrand (the density of the wider factor) stays smooth.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    x_law = ScaledInvChiSq(nu_post, scale_post)
    if nu_post >= SCALE_MIX_DF:
        nodes = x_law.quantile(GL_U)
        # density of Y = s / x evaluated at the nodes, times the Jacobian 1/x
        y = s[:, None] / nodes[None, :]
        terms = _log_chi2_over_df(y, SCALE_MIX_DF) - np.log(nodes)[None, :]
    else:
        nodes = _chi2_over_df_quantile(GL_U, SCALE_MIX_DF)
        x = s[:, None] / nodes[None, :]
        terms = x_law.logpdf(x) - np.log(nodes)[None, :]
    return special.logsumexp(terms + GL_LOGW[None, :], axis=1)


def _log_chi2_over_df(y, df):
    h = 0.5 * df
    return h * math.log(h) - special.gammaln(h) + (h - 1.0) * np.log(y) - h * y


def _chi2_over_df_quantile(p, df):
    return special.gammaincinv(0.5 * df, p) / (0.5 * df)


def independence_mh(cur, cur_lt, cur_lq, props, prop_lq, logu, log_target):
    """Run independence Metropolis-Hastings steps over pre-drawn proposals.

    ``cur_lq``/``prop_lq`` are proposal log-densities; returns
    ``(state, log_target, log_proposal, accepts)``.
    """
    accepted = 0
    for step in range(len(props)):
        prop_lt = log_target(props[step])
        if logu[step] < (prop_lt - cur_lt) - (prop_lq[step] - cur_lq):
            cur, cur_lt, cur_lq = props[step], prop_lt, prop_lq[step]
            accepted += 1
    return cur, cur_lt, cur_lq, accepted


def update_cluster_scale(
    state: PolyaChainState,
    cluster: int,
    resid: np.ndarray,
    s2_units: np.ndarray,
    base: ScaledInvChiSq,
    rng: np.random.Generator,
    mh_steps: int = 3,
) -> int:
    """Independence MH on one cluster variance; returns the number of accepts.

    The proposal is a draw from the conjugate posterior the cluster would have
    under normal noise, multiplied by an independent ``chi2_5 / 5`` variate.
    """
    dp = state.dp
    members = np.flatnonzero(dp.assignments == cluster)
    if members.size == 0:
        raise ValueError("cluster is empty")
    K = resid.shape[1]
    d = K - 1.0
    data = resid[members] + state.zbar_null[members, None]
    nu_post = base.nu + members.size * d
    scale_post = (base.nu * base.sigma2 + d * s2_units[members].sum()) / nu_post
    shape = state.shape

    def log_target(v):
        return base.logpdf(v) + shape.rows_loglik(data, math.sqrt(v)).sum()

    cur = dp.sigma2[cluster]
    cur_lt = log_target(cur)
    cur_lq = scale_proposal_logpdf(cur, nu_post, scale_post)[0]
    if not np.isfinite(cur_lt + cur_lq):
        raise FloatingPointError("zero target or proposal density at the current variance")
    xs = nu_post * scale_post / rng.chisquare(nu_post, size=mh_steps)
    ys = rng.chisquare(SCALE_MIX_DF, size=mh_steps) / SCALE_MIX_DF
    logu = np.log(rng.random(mh_steps))
    props = xs * ys
    prop_lq = scale_proposal_logpdf(props, nu_post, scale_post)
    cur, _, _, accepted = independence_mh(cur, cur_lt, cur_lq, props, prop_lq, logu, log_target)
    dp.sigma2[cluster] = cur
    return accepted


def update_null_imputations(state: PolyaChainState, resid: np.ndarray, rng: np.random.Generator, mh_steps: int = 3) -> int:
    """Independence MH for every unit's null mean; t5 proposals scaled by
    ``sigma / sqrt(K)``.  Returns the total number of accepts."""
    n, K = resid.shape
    sigma = np.sqrt(state.dp.unit_sigma2())
    prop_scale = sigma / math.sqrt(K)
    shape = state.shape

    def log_target(z):
        # the -K log sigma term is constant in z
        return shape.rows_loglik(resid + z[:, None], sigma)

    def log_prop(z):
        # t5 log-density up to a per-unit constant that cancels in the ratio
        return -0.5 * (IMPUTE_DF + 1.0) * np.log1p((z / prop_scale) ** 2 / IMPUTE_DF)

    cur = state.zbar_null.copy()
    cur_lt = log_target(cur)
    cur_lq = log_prop(cur)
    accepted = 0
    for _ in range(mh_steps):
        prop = prop_scale * rng.standard_t(IMPUTE_DF, size=n)
        prop_lt = log_target(prop)
        prop_lq = log_prop(prop)
        logu = np.log(rng.random(n))
        acc = logu < (prop_lt - cur_lt) - (prop_lq - cur_lq)
        if not np.all(np.isfinite(prop_lt[acc])):
            raise FloatingPointError("non-finite imputation target")
        cur = np.where(acc, prop, cur)
        cur_lt = np.where(acc, prop_lt, cur_lt)
        cur_lq = np.where(acc, prop_lq, cur_lq)
        accepted += int(acc.sum())
    state.zbar_null = cur
    return accepted


def update_polya(state: PolyaChainState, resid: np.ndarray, prior_params: PtParams, rng: np.random.Generator,
                 shape_scale: str = "anchored"):
    """Conjugate refresh of the shape from the rescaled imputed data.

    With ``shape_scale="anchored"`` the data are ``|Z_ij / sigma_ci|``; with
    ``"literal"`` they are ``|Z_ij * sqrt(m2(W)) / sigma_ci|``.
    """
    if shape_scale not in SHAPE_SCALES:
        raise ValueError(f"shape_scale must be one of {sorted(SHAPE_SCALES)}")
    sigma = np.sqrt(state.dp.unit_sigma2())
    factor = math.sqrt(state.pt.second_moment) if shape_scale == "literal" else 1.0
    z = imputed_data(state, resid) * (factor / sigma)[:, None]
    post = posterior_update(prior_params, np.abs(z))
    state.pt = SymmPtDensity(sample_prior(post, rng))
    state.refresh_standardized()
    return state


ALL_STEPS = frozenset({"assign", "scale", "impute", "concentration", "shape"})


def iterate(state, resid, s2_units, prior: DpPrior, pt_params: PtParams, config: PolyaChainConfig, rng,
            steps=ALL_STEPS):
    """One pass of the five steps; returns (scale accept rate, impute accept rate).

    ``steps`` selects a subset of ``ALL_STEPS`` (used to pin parts of the
    state in checks); the order of the selected steps never changes.
    """
    n = resid.shape[0]
    acc_scale = acc_imp = 0
    if "assign" in steps:
        update_assignments(state, resid, prior, rng, config.m_aux)
    if "scale" in steps:
        for k in range(state.dp.n_clusters):
            acc_scale += update_cluster_scale(state, k, resid, s2_units, prior.base, rng, config.mh_steps)
    if "impute" in steps:
        acc_imp = update_null_imputations(state, resid, rng, config.mh_steps)
    if "concentration" in steps:
        update_concentration(state.dp, n, prior, rng)
    if "shape" in steps:
        update_polya(state, resid, pt_params, rng, config.shape_scale)
    return (
        acc_scale / (config.mh_steps * state.dp.n_clusters),
        acc_imp / (config.mh_steps * n),
    )


def run_chain(
    zbar: np.ndarray,
    resid: np.ndarray,
    config: PolyaChainConfig,
    prior: DpPrior,
    pt_params: PtParams,
    rng: Optional[np.random.Generator] = None,
    normal_state: Optional[DpState] = None,
    keep_draws: bool = True,
    on_draw: Optional[Callable[[PolyaChainState], None]] = None,
) -> PolyaChainResult:
    """Normal-model warm start, then ``burnin + iters`` joint iterations.

    Returns ``iters`` snapshots of the imputed null means and the per-unit
    variances (``None`` when ``keep_draws`` is false; use ``on_draw`` to
    stream them instead).  ``zbar`` is only used for its length here; the
    observed means enter the p-values, never the chain.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    resid = np.ascontiguousarray(resid, dtype=float)
    n, K = resid.shape
    if np.asarray(zbar).shape != (n,):
        raise ValueError("zbar and residuals disagree on n")
    s2_units = np.einsum("ij,ij->i", resid, resid) / (K - 1)
    prior = resolve_prior(prior, s2_units)
    if normal_state is None:
        normal = run_conjugate_chain(s2_units, K, prior, config.normal_burnin, config.normal_iters, rng)
        normal_state = normal.state
    s2_units, _ = floor_s2(s2_units)
    state = init_from_normal_run(normal_state, n, pt_params, rng)
    zs = np.empty((config.iters, n)) if keep_draws else None
    sig = np.empty((config.iters, n)) if keep_draws else None
    diag = []
    for it in range(config.burnin + config.iters):
        a_scale, a_imp = iterate(state, resid, s2_units, prior, pt_params, config, rng)
        diag.append((it, state.dp.n_clusters, state.dp.concentration, state.pt.second_moment, a_scale, a_imp))
        if it >= config.burnin:
            if keep_draws:
                zs[it - config.burnin] = state.zbar_null
                sig[it - config.burnin] = state.dp.unit_sigma2()
            if on_draw is not None:
                on_draw(state)
    return PolyaChainResult(zs, sig, diag, state, prior)
