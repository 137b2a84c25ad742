"""Dirichlet-process mixture machinery for cluster-shared variances.

Contains the conjugate Gibbs sweep (Neal's Algorithm 2) for the sample
variance likelihood, a generic auxiliary-parameter sweep (Neal's
Algorithm 8), the Escobar-West update of the concentration parameter and a
driver for the normal-model chain.

All randomness is drawn from a ``numpy.random.Generator`` up front for each
sweep, then consumed by the (compiled) sequential loop.  Given a seed, the
output is therefore bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numba
import numpy as np
from scipy import optimize, special

from .statdist import ScaledInvChiSq

NU_MIN, NU_MAX = 0.5, 500.0
S2_FLOOR_EPS = 1e-8
TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class DpPrior:
    """Hyperparameters: Gamma(shape, scale) on the concentration, base measure
    on the variances and the number of auxiliary parameters for Algorithm 8.

    ``base=None`` means "calibrate from the observed sample variances".
    """

    gamma_shape: float = 0.001
    gamma_scale: float = 100.0
    base: Optional[ScaledInvChiSq] = None
    m_aux: int = 10

    def __post_init__(self):
        if not (self.gamma_shape > 0 and self.gamma_scale > 0 and self.m_aux >= 1):
            raise ValueError("DpPrior hyperparameters must be positive")


@dataclass
class DpState:
    """Markov state: dense cluster labels, per-cluster variances, concentration."""

    assignments: np.ndarray
    sigma2: np.ndarray
    concentration: float

    def __post_init__(self):
        self.assignments = np.ascontiguousarray(self.assignments, dtype=np.int64)
        self.sigma2 = np.ascontiguousarray(self.sigma2, dtype=float)

    @classmethod
    def single_cluster(cls, n: int, sigma2: float = 1.0, concentration: float = 1.0) -> "DpState":
        return cls(np.zeros(n, dtype=np.int64), np.array([sigma2]), concentration)

    @property
    def n(self) -> int:
        return self.assignments.size

    @property
    def n_clusters(self) -> int:
        return self.sigma2.size

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_clusters)

    def unit_sigma2(self) -> np.ndarray:
        return self.sigma2[self.assignments]

    def copy(self) -> "DpState":
        return DpState(self.assignments.copy(), self.sigma2.copy(), self.concentration)

    def check(self):
        """Raise ``ValueError`` if the state violates its invariants."""
        k = self.n_clusters
        if self.n and (self.assignments.min() < 0 or self.assignments.max() >= k):
            raise ValueError("assignment refers to a missing cluster")
        if np.any(self.sizes < 1):
            raise ValueError("empty cluster present")
        if not np.all(np.isfinite(self.sigma2)) or np.any(self.sigma2 <= 0):
            raise ValueError("cluster variances must be positive")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")

    def canonical(self) -> "DpState":
        """Relabel clusters by order of first appearance."""
        _, first = np.unique(self.assignments, return_index=True)
        order = np.argsort(first)
        old_labels = np.unique(self.assignments)[order]
        remap = np.empty(self.n_clusters, dtype=np.int64)
        remap[old_labels] = np.arange(old_labels.size)
        return DpState(remap[self.assignments], self.sigma2[old_labels], self.concentration)


# --------------------------------------------------------------------------
# base measure


def calibrate_base(s2_min: float, s2_max: float) -> ScaledInvChiSq:
    """Scaled-inv-chi2 whose 1% and 99% quantiles are ``s2_min`` and ``s2_max``.

    The quantile ratio only depends on ``nu`` and decreases monotonically, so
    ``nu`` is found by bracketing root search; ``nu`` is clipped to
    ``[0.5, 500]`` and in the clipped case the scale matches the geometric
    midpoint of the two targets.
    """
    if not (0 < s2_min < s2_max) or not math.isfinite(s2_max):
        raise ValueError(f"need 0 < s2_min < s2_max, got ({s2_min}, {s2_max})")

    def log_ratio(log_nu):
        nu = math.exp(log_nu)
        # variance quantile q(p) is proportional to 1 / gammainccinv(nu/2, p)
        g01 = special.gammainccinv(0.5 * nu, 0.01)
        g99 = special.gammainccinv(0.5 * nu, 0.99)
        return math.log(g01) - math.log(g99)

    target = math.log(s2_max) - math.log(s2_min)
    a, b = math.log(NU_MIN), math.log(NU_MAX)
    if target >= log_ratio(a):
        nu = NU_MIN
    elif target <= log_ratio(b):
        nu = NU_MAX
    else:
        nu = math.exp(optimize.brentq(lambda x: log_ratio(x) - target, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps))
    unit = ScaledInvChiSq(nu, 1.0)
    if NU_MIN < nu < NU_MAX:
        sigma2 = s2_min / unit.quantile(0.01)
    else:
        sigma2 = math.sqrt(s2_min * s2_max / (unit.quantile(0.01) * unit.quantile(0.99)))
    return ScaledInvChiSq(nu, sigma2)


def floor_s2(s2: np.ndarray):
    """Replace zero variances by ``1e-8 * median``; returns (values, mask)."""
    s2 = np.asarray(s2, dtype=float)
    zero = s2 <= 0
    if not zero.any():
        return s2, zero
    positive = s2[~zero]
    ref = float(np.median(s2)) if np.median(s2) > 0 else (float(positive.mean()) if positive.size else 1.0)
    return np.where(zero, S2_FLOOR_EPS * ref, s2), zero


def resolve_prior(prior: DpPrior, s2: np.ndarray) -> DpPrior:
    """Fill in a data-calibrated base measure if the prior has none."""
    if prior.base is not None:
        return prior
    s2, _ = floor_s2(s2)
    lo, hi = float(s2.min()), float(s2.max())
    if lo == hi:
        base = ScaledInvChiSq(NU_MAX, lo)
    else:
        base = calibrate_base(lo, hi)
    return replace(prior, base=base)


def new_cluster_marginal_loglik(s2, K, base: ScaledInvChiSq):
    """log of the sample-variance density integrated against the base measure.

    Under the base, ``S^2 / sigma0^2`` follows an F(K-1, nu0) law.
    """
    if np.any(np.asarray(K) < 2):
        raise ValueError("need K >= 2")
    s2 = np.asarray(s2, dtype=float)
    d1 = np.asarray(K, dtype=float) - 1.0
    d2 = base.nu
    x = s2 / base.sigma2
    with np.errstate(divide="ignore", invalid="ignore"):
        pow_term = np.where(d1 == 2.0, 0.0, (0.5 * d1 - 1.0) * np.log(x))
        out = (
            0.5 * d1 * np.log(d1 / d2)
            + pow_term
            - 0.5 * (d1 + d2) * np.log1p(d1 * x / d2)
            - special.betaln(0.5 * d1, 0.5 * d2)
            - math.log(base.sigma2)
        )
    return out if out.ndim else float(out)


def _loglik_consts(s2: np.ndarray, k: np.ndarray):
    """Per-unit constant part of the sample-variance log-likelihood."""
    h = 0.5 * (k.astype(float) - 1.0)
    with np.errstate(divide="ignore"):
        pow_term = np.where(h == 1.0, 0.0, (h - 1.0) * np.log(s2))
    return h * np.log(h) - special.gammaln(h) + pow_term, h


# --------------------------------------------------------------------------
# compiled sweep kernels


@numba.njit(cache=True)
def _categorical(logw, m, u):
    top = logw[0]
    for c in range(1, m):
        if logw[c] > top:
            top = logw[c]
    total = 0.0
    for c in range(m):
        logw[c] = math.exp(logw[c] - top)
        total += logw[c]
    target = u * total
    acc = 0.0
    for c in range(m):
        acc += logw[c]
        if acc > target:
            return c
    return m - 1


@numba.njit(cache=True)
def _drop_cluster(k, nclus, assign, sig2, sizes):
    last = nclus - 1
    if k != last:
        sig2[k] = sig2[last]
        sizes[k] = sizes[last]
        for j in range(assign.size):
            if assign[j] == last:
                assign[j] = k
    return last


@numba.njit(cache=True)
def _conjugate_assign_kernel(assign, sig2, sizes, nclus, s2, h, const, marg, logc, new_num, chisq_new, u):
    n = assign.size
    logw = np.empty(n + 1)
    for i in range(n):
        k = assign[i]
        sizes[k] -= 1
        if sizes[k] == 0:
            nclus = _drop_cluster(k, nclus, assign, sig2, sizes)
        for c in range(nclus):
            logw[c] = math.log(sizes[c]) + const[i] - h[i] * math.log(sig2[c]) - h[i] * s2[i] / sig2[c]
        logw[nclus] = logc + marg[i]
        pick = _categorical(logw, nclus + 1, u[i])
        if pick == nclus:
            sig2[nclus] = new_num[i] / chisq_new[i]
            sizes[nclus] = 1
            nclus += 1
        else:
            sizes[pick] += 1
        assign[i] = pick
    return nclus


# --------------------------------------------------------------------------
# sweeps


def _workspace(state: DpState):
    n = state.n
    sig2 = np.empty(n + 1)
    sig2[: state.n_clusters] = state.sigma2
    sizes = np.zeros(n + 1, dtype=np.int64)
    sizes[: state.n_clusters] = state.sizes
    return sig2, sizes


def resample_cluster_params(state: DpState, s2, k, base: ScaledInvChiSq, rng: np.random.Generator) -> DpState:
    """Draw every cluster variance from its conjugate posterior."""
    s2 = np.asarray(s2, dtype=float)
    d = np.broadcast_to(np.asarray(k, dtype=float), s2.shape) - 1.0
    kc = state.n_clusters
    dof = base.nu + np.bincount(state.assignments, weights=d, minlength=kc)
    ss = base.nu * base.sigma2 + np.bincount(state.assignments, weights=d * s2, minlength=kc)
    state.sigma2 = ss / rng.chisquare(dof)
    return state


def sweep_conjugate(state: DpState, s2, k, prior: DpPrior, rng: np.random.Generator) -> DpState:
    """One Algorithm-2 pass: reassign every unit, then redraw cluster variances.

    ``s2`` and ``k`` are per-unit sample variances and replicate counts (zero
    variances should already be floored, see :func:`floor_s2`).
    """
    base = prior.base
    if base is None:
        raise ValueError("prior has no base measure; call resolve_prior first")
    s2 = np.ascontiguousarray(s2, dtype=float)
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), s2.shape)
    if s2.size != state.n:
        raise ValueError("state and data disagree on n")
    const, h = _loglik_consts(s2, k)
    marg = new_cluster_marginal_loglik(s2, k, base)
    d = k - 1.0
    new_num = base.nu * base.sigma2 + d * s2
    chisq_new = rng.chisquare(base.nu + d)
    u = rng.random(state.n)
    sig2, sizes = _workspace(state)
    assign = state.assignments.copy()
    nclus = _conjugate_assign_kernel(
        assign, sig2, sizes, state.n_clusters, s2, h, const, np.ascontiguousarray(marg, dtype=float),
        math.log(state.concentration), new_num, chisq_new, u,
    )
    state.assignments = assign
    state.sigma2 = sig2[:nclus].copy()
    return resample_cluster_params(state, s2, k, base, rng)


def sweep_aux(
    state: DpState,
    unit_loglik: Callable[[int, float], float],
    prior: DpPrior,
    rng: np.random.Generator,
) -> DpState:
    """One Algorithm-8 pass over the assignments for an arbitrary likelihood.

    ``unit_loglik(i, sigma2)`` returns the log-likelihood of unit ``i`` under
    variance ``sigma2``.  Auxiliary variances are drawn from ``prior.base``;
    a unit that sits alone in its cluster reuses its own variance as the
    first auxiliary value.
    """
    m = prior.m_aux
    n = state.n
    aux = prior.base.sample(rng, size=(n, m))
    u = rng.random(n)
    sig2, sizes = _workspace(state)
    assign = state.assignments.copy()
    nclus = state.n_clusters
    log_cm = math.log(state.concentration / m)
    logw = np.empty(n + m)
    for i in range(n):
        c = assign[i]
        sizes[c] -= 1
        phi = aux[i].copy()
        if sizes[c] == 0:
            phi[0] = sig2[c]
            nclus = _drop_cluster(c, nclus, assign, sig2, sizes)
        for j in range(nclus):
            logw[j] = math.log(sizes[j]) + unit_loglik(i, sig2[j])
        for j in range(m):
            logw[nclus + j] = log_cm + unit_loglik(i, phi[j])
        if not np.all(np.isfinite(logw[: nclus + m]) | (logw[: nclus + m] == -np.inf)):
            raise FloatingPointError(f"non-finite log-likelihood for unit {i}")
        pick = _categorical(logw, nclus + m, u[i])
        if pick >= nclus:
            sig2[nclus] = phi[pick - nclus]
            sizes[nclus] = 1
            pick = nclus
            nclus += 1
        else:
            sizes[pick] += 1
        assign[i] = pick
    state.assignments = assign
    state.sigma2 = sig2[:nclus].copy()
    return state


def escobar_west_params(eta: float, k: int, n: int, a: float, b: float):
    """Mixture weight and scale of the concentration's full conditional."""
    bstar = 1.0 / (1.0 / b - math.log(eta))
    w = (a + k - 1.0) / (a + k - 1.0 + n / bstar)
    return w, bstar


def update_concentration(state: DpState, n: int, prior: DpPrior, rng: np.random.Generator) -> float:
    """Escobar-West auxiliary-variable draw of the DP concentration."""
    if n < 1:
        raise ValueError("need n >= 1")
    k = state.n_clusters
    a = prior.gamma_shape
    eta = rng.beta(state.concentration + 1.0, n)
    w, bstar = escobar_west_params(max(eta, TINY), k, n, a, prior.gamma_scale)
    shape = a + k if rng.random() < w else a + k - 1.0
    c = rng.gamma(shape, bstar)
    state.concentration = float(max(c, TINY))
    return state.concentration


# --------------------------------------------------------------------------
# normal-model chain


@dataclass
class NormalChainResult:
    state: DpState
    prior: DpPrior
    sigma2_draws: Optional[np.ndarray] = None
    diagnostics: list = field(default_factory=list)
    floored: np.ndarray = None


def run_conjugate_chain(
    s2,
    k,
    prior: DpPrior,
    burnin: int,
    iters: int,
    rng: np.random.Generator,
    keep_draws: bool = False,
    on_draw: Optional[Callable[[DpState], None]] = None,
    state: Optional[DpState] = None,
) -> NormalChainResult:
    """Run the Algorithm-2 chain with concentration updates.

    Starts from a single cluster with variance 1 unless ``state`` is given.
    After ``burnin`` sweeps, each of the next ``iters`` states is handed to
    ``on_draw`` and optionally stored as per-unit variances.
    """
    s2 = np.asarray(s2, dtype=float)
    prior = resolve_prior(prior, s2)
    s2f, floored = floor_s2(s2)
    n = s2.size
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), s2.shape)
    state = DpState.single_cluster(n) if state is None else state.copy()
    draws = np.empty((iters, n)) if keep_draws else None
    diag = []
    for it in range(burnin + iters):
        sweep_conjugate(state, s2f, k, prior, rng)
        update_concentration(state, n, prior, rng)
        unit = state.unit_sigma2()
        diag.append((it, state.n_clusters, state.concentration, float(unit.mean())))
        if it >= burnin:
            if keep_draws:
                draws[it - burnin] = unit
            if on_draw is not None:
                on_draw(state)
    return NormalChainResult(state, prior, draws, diag, floored)


DIAGNOSTIC_COLUMNS = ("iteration", "k_clusters", "concentration", "mean_sigma2")
