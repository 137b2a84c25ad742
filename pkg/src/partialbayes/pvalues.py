"""P-value engines.

Closed-form methods (t-test, moderated t, known variance), the two partially
Bayes pipelines built on the MCMC samplers, a quadrature oracle for the
location model with a known noise density, and the parametric paired-bias
procedure.  Each public engine returns :class:`PValueReport` objects; the
``*_array`` helpers expose the same computations on plain arrays for the
simulation harness.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Optional, Sequence

import numpy as np
from scipy import optimize, special

from .dpmm import DpPrior, run_conjugate_chain
from .pbsampler import PolyaChainConfig, run_chain
from .polyatree import PtParams
from .statdist import std_normal_cdf, student_t_twosided_sf
from .summaries import ConfigSummary, NormalSummary, config_arrays, normal_arrays

METHODS = ("ttest", "limma", "normal_pb", "polya_pb", "oracle_config", "oracle_sigma", "paired_pb")


@dataclass(frozen=True)
class PValueReport:
    id: Hashable
    pvalue: float
    mc_se: float
    method: str
    degenerate: bool = False

    def __post_init__(self):
        if not (0.0 <= self.pvalue <= 1.0):
            raise ValueError(f"p-value {self.pvalue!r} outside [0, 1]")
        if not (math.isfinite(self.mc_se) and self.mc_se >= 0):
            raise ValueError("Monte Carlo standard error must be finite and nonnegative")


def reports_from_arrays(ids, p, se, method, degenerate=None):
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    se = np.broadcast_to(np.asarray(se, dtype=float), p.shape)
    degenerate = np.zeros(p.shape, dtype=bool) if degenerate is None else degenerate
    return [
        PValueReport(i, float(pi), float(si), method, bool(di))
        for i, pi, si, di in zip(ids, p, se, degenerate)
    ]


def write_pvalues_csv(path, reports: Iterable[PValueReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["id", "method", "pvalue", "mc_se"])
        for r in reports:
            out.writerow([r.id, r.method, repr(r.pvalue), repr(r.mc_se)])


# --------------------------------------------------------------------------
# closed form


def ttest_pvalue_array(t, s2, K):
    """Two-sided t-test on ``K - 1`` degrees of freedom.

    Returns ``(p, degenerate)``.  Units with ``s2 == 0`` get ``p = 0``
    (or 1 when ``t == 0`` too) and are flagged.
    """
    t = np.asarray(t, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    K = np.asarray(K)
    if np.any(K < 2):
        raise ValueError("need K >= 2")
    degenerate = s2 == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(degenerate, 0.0, np.abs(t) / np.sqrt(np.where(degenerate, 1.0, s2)))
    p = student_t_twosided_sf(stat, K - 1.0)
    p = np.where(degenerate, np.where(t == 0, 1.0, 0.0), p)
    return p, degenerate


def ttest_pvalue(s: NormalSummary) -> PValueReport:
    p, deg = ttest_pvalue_array(s.t, s.s2, s.k)
    return PValueReport(s.id, float(p), 0.0, "ttest", bool(deg))


def limma_pvalue_array(t, u, K, nu0: float, sigma02: float):
    """Moderated t: the variance estimate pools ``nu0`` prior degrees of freedom.

    ``nu0 = inf`` gives the known-variance normal tail at ``sigma02``.
    """
    if nu0 < 0 or not sigma02 > 0:
        raise ValueError("need nu0 >= 0 and sigma02 > 0")
    if math.isinf(nu0):
        return 2.0 * std_normal_cdf(-np.abs(np.asarray(t, dtype=float)) / math.sqrt(sigma02))
    K = np.asarray(K)
    if np.any(K < 2):
        raise ValueError("need K >= 2")
    d = K - 1.0
    pooled = (d * np.asarray(u, dtype=float) + nu0 * sigma02) / (d + nu0)
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(pooled > 0, np.abs(t) / np.sqrt(pooled), np.where(t == 0, 0.0, np.inf))
    return student_t_twosided_sf(stat, d + nu0)


def fit_limma_prior(s2, K) -> tuple:
    """Moment estimates of the prior degrees of freedom and scale.

    Matches the mean and variance of ``log s2`` to those of a scaled
    F-distributed variable.  Returns ``(nu0, sigma02)``; ``nu0`` is
    ``inf`` when the observed spread is no larger than sampling noise.
    """
    s2 = np.asarray(s2, dtype=float)
    d = np.broadcast_to(np.asarray(K, dtype=float) - 1.0, s2.shape)
    keep = s2 > 0
    if keep.sum() < 2:
        raise ValueError("need at least two positive variances to fit the prior")
    s2, d = s2[keep], d[keep]
    e = np.log(s2) - special.digamma(0.5 * d) + np.log(0.5 * d)
    e_mean = float(e.mean())
    excess = float(np.var(e, ddof=1) - np.mean(special.polygamma(1, 0.5 * d)))
    if excess <= 0:
        return math.inf, math.exp(e_mean)
    # trigamma is decreasing, so solve trigamma(x) = excess on a bracket
    x = optimize.brentq(lambda x: float(special.polygamma(1, x)) - excess, 1e-8, 1e8)
    nu0 = 2.0 * x
    return nu0, math.exp(e_mean + special.digamma(x) - math.log(x))


def limma_pvalue(t: float, u: float, K: int, nu0: float, sigma02: float, id: Hashable = None) -> PValueReport:
    return PValueReport(id, float(limma_pvalue_array(t, u, K, nu0, sigma02)), 0.0, "limma", u == 0 and nu0 == 0)


def oracle_known_sigma(t: float, sigma: float, id: Hashable = None) -> PValueReport:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return PValueReport(id, 2.0 * std_normal_cdf(-abs(t) / sigma), 0.0, "oracle_sigma")


# --------------------------------------------------------------------------
# normal-noise partially Bayes


@dataclass
class _TailAverager:
    """Streaming mean and variance of per-draw tail probabilities."""

    t_abs: np.ndarray
    imputed_rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        n = self.t_abs.size
        self.count = 0
        self.total = np.zeros(n)
        self.total_sq = np.zeros(n)
        self.exceed = np.zeros(n, dtype=np.int64)

    def __call__(self, sigma2):
        sigma = np.sqrt(sigma2)
        q = 2.0 * std_normal_cdf(-self.t_abs / sigma)
        self.count += 1
        self.total += q
        self.total_sq += q * q
        if self.imputed_rng is not None:
            draw = sigma * self.imputed_rng.standard_normal(sigma.size)
            self.exceed += np.abs(draw) >= self.t_abs

    def averaged(self):
        B = self.count
        p = self.total / B
        var = np.maximum(self.total_sq / B - p * p, 0.0)
        return p, np.sqrt(var / B)

    def imputed(self):
        B = self.count
        p = (1.0 + self.exceed) / (1.0 + B)
        return p, np.sqrt(p * (1.0 - p) / B)


def normal_pb_array(t, s2, K, prior: DpPrior, burnin: int, iters: int, rng: np.random.Generator, imputed: bool = False):
    """Average over the variance posterior of ``2 Phi(-|t| / sigma)``.

    Returns ``(p, mc_se)``; with ``imputed=True`` also returns the
    tail-counting estimate built from one simulated null statistic per draw
    of the same chain, as ``(p, mc_se, p_imp, mc_se_imp)``.
    """
    t = np.asarray(t, dtype=float)
    if t.size < 1:
        raise ValueError("need at least one unit")
    if iters < 1:
        raise ValueError("need at least one kept draw")
    acc = _TailAverager(np.abs(t), rng.spawn(1)[0] if imputed else None)
    run_conjugate_chain(s2, K, prior, burnin, iters, rng, on_draw=lambda st: acc(st.unit_sigma2()))
    p, se = acc.averaged()
    if imputed:
        return (p, se) + acc.imputed()
    return p, se


def normal_pb_pvalues(
    summaries: Sequence[NormalSummary],
    prior: DpPrior = DpPrior(),
    burnin: int = 5000,
    iters: int = 10000,
    rng: Optional[np.random.Generator] = None,
) -> list:
    rng = np.random.default_rng() if rng is None else rng
    t, s2, k = normal_arrays(summaries)
    p, se = normal_pb_array(t, s2, k, prior, burnin, iters, rng)
    return reports_from_arrays([s.id for s in summaries], p, se, "normal_pb", s2 == 0)


# --------------------------------------------------------------------------
# location model with unknown noise shape


def polya_pb_array(zbar, resid, config: PolyaChainConfig, prior: DpPrior, pt_params: PtParams, rng: np.random.Generator):
    """Tail counts of the imputed null means against the observed ``|zbar|``.

    Returns ``(p, mc_se, result)`` where ``result`` is the chain result
    (draws not stored).
    """
    zbar = np.asarray(zbar, dtype=float)
    target = np.abs(zbar)
    exceed = np.zeros(zbar.size, dtype=np.int64)

    def count(state):
        np.add(exceed, np.abs(state.zbar_null) >= target, out=exceed)

    res = run_chain(zbar, resid, config, prior, pt_params, rng, keep_draws=False, on_draw=count)
    B = config.iters
    p = (1.0 + exceed) / (1.0 + B)
    return p, np.sqrt(p * (1.0 - p) / B), res


def polya_pb_pvalues(
    configs: Sequence[ConfigSummary],
    config: PolyaChainConfig = PolyaChainConfig(),
    prior: DpPrior = DpPrior(),
    pt_params: PtParams = PtParams(),
    rng: Optional[np.random.Generator] = None,
) -> list:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    zbar, resid = config_arrays(configs)
    p, se, _ = polya_pb_array(zbar, resid, config, prior, pt_params, rng)
    return reports_from_arrays([c.id for c in configs], p, se, "polya_pb")


# --------------------------------------------------------------------------
# quadrature oracle for a known noise density


@dataclass(frozen=True)
class QuadConfig:
    """Adaptive Simpson settings for :func:`oracle_config_pvalue`."""

    rel_tol: float = 1e-8
    width_sds: float = 12.0
    edge_ratio: float = 1e-12
    initial_panels: int = 16
    max_rounds: int = 40


def adaptive_simpson(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, rel_tol: float = 1e-8,
                     initial_panels: int = 16, max_rounds: int = 40) -> float:
    """Adaptive Simpson's rule refined breadth-first.

    ``f`` must accept an array of abscissae.  All panels that fail the
    Richardson test ``|S_left + S_right - S_whole| <= 15 tol`` are bisected
    together, so each round costs one vectorized call.  The absolute tolerance
    is ``rel_tol`` times the coarse estimate of the integral, shared between
    panels in proportion to their width.
    """
    if not a < b:
        return 0.0
    x = np.linspace(a, b, 2 * initial_panels + 1)
    fx = f(x)
    lo, hi = x[:-1:2], x[2::2]
    flo, fmid, fhi = fx[:-1:2], fx[1::2], fx[2::2]
    whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)
    tol_density = rel_tol * abs(whole.sum()) / (b - a)
    total = 0.0
    for _ in range(max_rounds):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        fv = f(np.concatenate([lm, rm]))
        flm, frm = fv[: lm.size], fv[lm.size:]
        left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi)
        err = left + right - whole
        done = np.abs(err) <= 15.0 * tol_density * (hi - lo)
        total += float(np.sum((left + right + err / 15.0)[done]))
        keep = ~done
        if not keep.any():
            return total
        lo, mid, hi = lo[keep], mid[keep], hi[keep]
        flo, flm, fmid, frm, fhi = flo[keep], flm[keep], fmid[keep], frm[keep], fhi[keep]
        lo, hi = np.concatenate([lo, mid]), np.concatenate([mid, hi])
        flo, fmid, fhi = np.concatenate([flo, fmid]), np.concatenate([flm, frm]), np.concatenate([fmid, fhi])
        whole = np.concatenate([left[keep], right[keep]])
    # refinement budget exhausted: accept the finest estimates
    return total + float(whole.sum())


def oracle_config_pvalue(c: ConfigSummary, log_w: Callable[[np.ndarray], np.ndarray], quad: QuadConfig = QuadConfig()) -> PValueReport:
    """Exact conditional tail of the sample mean given the configuration.

    Under the null the sample mean has density proportional to
    ``prod_j w(t + U_j)``; both the normalizer and the two-sided tail beyond
    ``|zbar|`` are computed by adaptive quadrature.
    """
    U = np.asarray(c.residuals, dtype=float)
    K = U.size
    a = abs(float(c.zbar))

    def log_f(t):
        t = np.asarray(t, dtype=float)
        return np.sum(log_w(t[..., None] + U), axis=-1)

    sd = math.sqrt(c.s2) if c.s2 > 0 else 1.0
    half = quad.width_sds * sd / math.sqrt(K)
    grid = np.linspace(-half, half, 257)
    peak = float(np.max(log_f(grid)))
    if not np.isfinite(peak):
        raise FloatingPointError("noise density vanishes on the whole search grid")
    log_edge = math.log(quad.edge_ratio)
    for _ in range(200):
        edge = max(float(log_f(np.array(-half))), float(log_f(np.array(half))))
        if edge - peak < log_edge and half > a:
            break
        half *= 1.5
        peak = max(peak, float(np.max(log_f(np.linspace(-half, half, 257)))))
    else:
        raise FloatingPointError("conditional density does not decay; integration domain unbounded")

    def f(t):
        return np.exp(log_f(t) - peak)

    kw = dict(rel_tol=quad.rel_tol, initial_panels=quad.initial_panels, max_rounds=quad.max_rounds)
    inner = adaptive_simpson(f, -a, a, **kw)
    tails = adaptive_simpson(f, -half, -a, **kw) + adaptive_simpson(f, a, half, **kw)
    norm = inner + tails
    if not (norm > 0 and np.isfinite(norm)):
        raise FloatingPointError("vanishing normalizer")
    return PValueReport(c.id, min(1.0, tails / norm), 0.0, "oracle_config")


# --------------------------------------------------------------------------
# paired-bias parametric partially Bayes


@dataclass(frozen=True)
class PairedBiasData:
    y1: np.ndarray
    y0: np.ndarray
    sigma1: np.ndarray
    sigma0: np.ndarray
    ids: tuple = None

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, k), dtype=float) for k in ("y1", "y0", "sigma1", "sigma0")]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ValueError("paired-bias inputs must be vectors of equal length")
        if np.any(arrs[2] <= 0) or np.any(arrs[3] <= 0):
            raise ValueError("standard deviations must be positive")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("non-finite paired-bias input")
        for k, a in zip(("y1", "y0", "sigma1", "sigma0"), arrs):
            object.__setattr__(self, k, a)
        ids = tuple(range(arrs[0].size)) if self.ids is None else tuple(self.ids)
        if len(ids) != arrs[0].size:
            raise ValueError("ids length mismatch")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.y1.size


@dataclass
class PairedBiasDraws:
    """Kept Gibbs draws with a leading chain axis."""

    b: np.ndarray
    eta: np.ndarray
    tau2: np.ndarray


def paired_bias_gibbs(d: PairedBiasData, iters: int = 1000, burnin: int = 1000, rng: Optional[np.random.Generator] = None,
                      chains: int = 4) -> PairedBiasDraws:
    """Gibbs sampler for the biases given the control measurements.

    The biases are exchangeable normal with mean ``eta`` and sd ``tau``;
    ``(eta, tau)`` get a flat prior, which turns into an inverse-gamma
    conditional with shape ``(n - 1) / 2`` for ``tau^2``.
    """
    n = d.n
    if n < 3:
        raise ValueError("the flat hyperprior needs n >= 3 for a proper posterior")
    if iters < 1 or burnin < 0 or chains < 1:
        raise ValueError("bad chain lengths")
    rng = np.random.default_rng() if rng is None else rng
    prec0 = 1.0 / d.sigma0**2
    out_b = np.empty((chains, iters, n))
    out_eta = np.empty((chains, iters))
    out_tau2 = np.empty((chains, iters))
    spread = max(float(np.var(d.y0, ddof=1)), float(np.mean(d.sigma0**2)))
    for ch, chain_rng in enumerate(rng.spawn(chains)):
        b = d.y0.copy()
        eta = float(b.mean())
        tau2 = spread * 2.0**ch
        for it in range(burnin + iters):
            prec = prec0 + 1.0 / tau2
            b = (d.y0 * prec0 + eta / tau2) / prec + chain_rng.standard_normal(n) / np.sqrt(prec)
            eta = float(b.mean()) + math.sqrt(tau2 / n) * chain_rng.standard_normal()
            ss = float(np.sum((b - eta) ** 2))
            tau2 = max(0.5 * ss / chain_rng.standard_gamma(0.5 * (n - 1)), np.finfo(float).tiny)
            if it >= burnin:
                k = it - burnin
                out_b[ch, k], out_eta[ch, k], out_tau2[ch, k] = b, eta, tau2
    return PairedBiasDraws(out_b, out_eta, out_tau2)


def paired_bias_tail(y1, sigma1, b):
    """``P(|Y'| >= |y1|)`` for ``Y' ~ N(b, sigma1^2)``, broadcasting over ``b``."""
    y = np.abs(np.asarray(y1, dtype=float))
    s = np.asarray(sigma1, dtype=float)
    b = np.asarray(b, dtype=float)
    return std_normal_cdf((-y - b) / s) + std_normal_cdf((b - y) / s)


def paired_bias_pvalues_from_draws(d: PairedBiasData, b_draws: np.ndarray) -> list:
    """Average the tail over bias draws shaped ``(..., n)``."""
    q = paired_bias_tail(d.y1, d.sigma1, np.asarray(b_draws).reshape(-1, d.n))
    B = q.shape[0]
    p = q.mean(axis=0)
    se = q.std(axis=0) / math.sqrt(B)
    return reports_from_arrays(d.ids, p, se, "paired_pb")


def paired_bias_pb(d: PairedBiasData, iters: int = 1000, burnin: int = 1000, rng: Optional[np.random.Generator] = None,
                   chains: int = 4) -> list:
    draws = paired_bias_gibbs(d, iters, burnin, rng, chains)
    return paired_bias_pvalues_from_draws(d, draws.b)
