"""Simulation scenarios with Subbotin noise, rejection rules and error metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dpmm import DpPrior
from .pbsampler import PolyaChainConfig
from .polyatree import PtParams
from .pvalues import normal_pb_array, oracle_config_pvalue, polya_pb_array, ttest_pvalue_array
from .statdist import Subbotin, subbotin_scale_for_variance
from .summaries import ConfigSummary, UnitDataset, summarize_config_array, summarize_normal_array

SIM_METHODS = ("ttest", "normal_pb", "polya_pb", "oracle")
METRICS = ("type1_at_001", "power_at_001", "fdr_bh_01", "power_bh_01")


@dataclass(frozen=True)
class SimScenario:
    """One simulation setting.

    ``variance_spec`` is ``{"fixed": value}`` or ``{"uniform": [lo, hi]}``.
    Exactly ``round(n * (1 - null_fraction))`` units are alternatives, with
    location ``alt_effect_multiplier * sigma_i``.
    """

    n: int = 2000
    K: int = 12
    xi: float = 2.0
    variance_spec: dict = field(default_factory=lambda: {"fixed": 1.0})
    null_fraction: float = 0.9
    alt_effect_multiplier: float = 2.5 / math.sqrt(2.0)
    reps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.K < 2:
            raise ValueError("need n >= 1 and K >= 2")
        if not 0 <= self.null_fraction <= 1:
            raise ValueError("null_fraction must lie in [0, 1]")
        if not self.xi > 0:
            raise ValueError("Subbotin shape must be positive")
        if self.reps < 1:
            raise ValueError("need at least one replicate")
        spec = self.variance_spec
        if not (isinstance(spec, dict) and len(spec) == 1):
            raise ValueError("variance_spec must be {'fixed': v} or {'uniform': [lo, hi]}")
        (kind, val), = spec.items()
        if kind == "fixed":
            if not float(val) > 0:
                raise ValueError("fixed variance must be positive")
        elif kind == "uniform":
            lo, hi = map(float, val)
            if not 0 < lo <= hi:
                raise ValueError("uniform variance range must satisfy 0 < lo <= hi")
        else:
            raise ValueError(f"unknown variance_spec kind {kind!r}")

    @property
    def variance_label(self) -> str:
        (kind, val), = self.variance_spec.items()
        if kind == "fixed":
            return f"fixed:{float(val):g}"
        lo, hi = map(float, val)
        return f"uniform:{lo:g}-{hi:g}"

    def draw_variances(self, rng: np.random.Generator) -> np.ndarray:
        (kind, val), = self.variance_spec.items()
        if kind == "fixed":
            return np.full(self.n, float(val))
        lo, hi = map(float, val)
        return rng.uniform(lo, hi, size=self.n)


@dataclass
class SimTruth:
    is_null: np.ndarray
    sigma2: np.ndarray
    theta: np.ndarray
    b: np.ndarray


def rep_rng(seed: int, rep_index: int) -> np.random.Generator:
    """Independent stream for one replicate, derived from ``(seed, rep_index)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep_index,)))


def generate_array(scenario: SimScenario, rng: np.random.Generator):
    """Draw one data set; returns ``(z, truth)`` with ``z`` of shape ``(n, K)``."""
    n, K = scenario.n, scenario.K
    sigma2 = scenario.draw_variances(rng)
    n_alt = int(round(n * (1.0 - scenario.null_fraction)))
    is_null = np.ones(n, dtype=bool)
    is_null[rng.permutation(n)[:n_alt]] = False
    theta = np.where(is_null, 0.0, scenario.alt_effect_multiplier * np.sqrt(sigma2))
    b = subbotin_scale_for_variance(scenario.xi, sigma2)
    noise = Subbotin(scenario.xi, 1.0).sample(rng, size=(n, K))
    z = theta[:, None] + b[:, None] * noise
    return z, SimTruth(is_null, sigma2, theta, b)


def generate(scenario: SimScenario, rep_index: int, rng: Optional[np.random.Generator] = None):
    """List of :class:`UnitDataset` plus the truth for replicate ``rep_index``."""
    rng = rep_rng(scenario.seed, rep_index) if rng is None else rng
    z, truth = generate_array(scenario, rng)
    return [UnitDataset(i, row) for i, row in enumerate(z)], truth


def bh_threshold(pvals, q: float) -> float:
    """Benjamini-Hochberg step-up cutoff: reject every ``p <= threshold``.

    Returns the largest sorted ``p_(i)`` with ``p_(i) <= q i / n``, or 0 when
    no such ``i`` exists.  Rejecting ``p <= 0`` in that case rejects
    nothing, since a zero p-value would itself have qualified.
    """
    p = np.sort(np.asarray(pvals, dtype=float).ravel())
    if p.size == 0:
        raise ValueError("empty p-value vector")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    ok = np.flatnonzero(p <= q * np.arange(1, p.size + 1) / p.size)
    return float(p[ok[-1]]) if ok.size else 0.0


def bh_reject(pvals, q: float) -> np.ndarray:
    p = np.asarray(pvals, dtype=float)
    sp = np.sort(p)
    ok = np.flatnonzero(sp <= q * np.arange(1, p.size + 1) / p.size)
    if ok.size == 0:
        return np.zeros(p.shape, dtype=bool)
    return p <= sp[ok[-1]]


@dataclass(frozen=True)
class SimMetrics:
    type1_at_001: float
    power_at_001: float
    fdr_bh_01: float
    power_bh_01: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")


def _ratio(num, den) -> float:
    return float(num) / den if den else 0.0


def compute_metrics(pvals, truth_is_null, q_bh: float = 0.1, fixed_alpha: float = 0.01) -> SimMetrics:
    """Fixed-threshold error rates and BH false discovery proportion and power.

    Ratios with an empty denominator are reported as 0.
    """
    p = np.asarray(pvals, dtype=float)
    null = np.asarray(truth_is_null, dtype=bool)
    if p.shape != null.shape:
        raise ValueError("p-values and truth labels differ in length")
    alt = ~null
    fixed = p <= fixed_alpha
    bh = bh_reject(p, q_bh)
    return SimMetrics(
        type1_at_001=_ratio(np.sum(fixed & null), null.sum()),
        power_at_001=_ratio(np.sum(fixed & alt), alt.sum()),
        fdr_bh_01=_ratio(np.sum(bh & null), bh.sum()),
        power_bh_01=_ratio(np.sum(bh & alt), alt.sum()),
    )


@dataclass(frozen=True)
class SimSettings:
    """Chain lengths and priors used by the partially Bayes methods."""

    normal_burnin: int = 5000
    normal_iters: int = 10000
    polya: PolyaChainConfig = PolyaChainConfig()
    prior: DpPrior = DpPrior()
    pt_params: PtParams = PtParams()


def oracle_pvalues(z: np.ndarray, truth: SimTruth, xi: float) -> np.ndarray:
    """Conditional-tail oracle with the true noise density of every unit."""
    zbar, resid = summarize_config_array(z)
    out = np.empty(zbar.size)
    for i in range(zbar.size):
        law = Subbotin(xi, float(truth.b[i]))
        out[i] = oracle_config_pvalue(ConfigSummary(float(zbar[i]), resid[i], i), law.logpdf).pvalue
    return out


def method_pvalues(method: str, z: np.ndarray, truth: SimTruth, scenario: SimScenario, settings: SimSettings,
                   rng: np.random.Generator) -> np.ndarray:
    K = z.shape[1]
    if method == "ttest":
        t, s2 = summarize_normal_array(z)
        return ttest_pvalue_array(t, s2, K)[0]
    if method == "normal_pb":
        t, s2 = summarize_normal_array(z)
        return normal_pb_array(t, s2, K, settings.prior, settings.normal_burnin, settings.normal_iters, rng)[0]
    if method == "polya_pb":
        zbar, resid = summarize_config_array(z)
        cfg = replace(settings.polya, normal_burnin=settings.normal_burnin, normal_iters=settings.normal_iters)
        return polya_pb_array(zbar, resid, cfg, settings.prior, settings.pt_params, rng)[0]
    if method == "oracle":
        return oracle_pvalues(z, truth, scenario.xi)
    raise ValueError(f"unknown simulation method {method!r}")


def run_rep(scenario: SimScenario, rep_index: int, methods: Sequence[str], settings: SimSettings = SimSettings(),
            q_bh: float = 0.1, fixed_alpha: float = 0.01) -> Dict[str, SimMetrics]:
    """Simulate one replicate and score every method on the same data.

    Each method draws from its own child stream so adding or removing a
    method leaves the others unchanged.
    """
    rng = rep_rng(scenario.seed, rep_index)
    z, truth = generate_array(scenario, rng)
    out = {}
    for m in methods:
        mrng = np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=(rep_index, 1 + SIM_METHODS.index(m))))
        p = method_pvalues(m, z, truth, scenario, settings, mrng)
        out[m] = compute_metrics(p, truth.is_null, q_bh, fixed_alpha)
    return out


@dataclass
class ScenarioResult:
    scenario: SimScenario
    per_rep: List[Dict[str, SimMetrics]]

    def summary(self) -> Dict[str, Dict[str, tuple]]:
        """Mean and across-replicate standard error of every metric."""
        out = {}
        for m in self.per_rep[0]:
            out[m] = {}
            for metric in METRICS:
                vals = np.array([getattr(r[m], metric) for r in self.per_rep])
                se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
                out[m][metric] = (float(vals.mean()), se)
        return out

    def rows(self):
        for m, metrics in self.summary().items():
            for metric, (value, se) in metrics.items():
                yield [repr(float(self.scenario.xi)), self.scenario.variance_label, m, metric, repr(value), repr(se)]


def run_scenario(scenario: SimScenario, methods: Sequence[str] = SIM_METHODS, settings: SimSettings = SimSettings(),
                 q_bh: float = 0.1, fixed_alpha: float = 0.01, threads: int = 1) -> ScenarioResult:
    for m in methods:
        if m not in SIM_METHODS:
            raise ValueError(f"unknown simulation method {m!r}")
    jobs = range(scenario.reps)
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(threads) as pool:
            per_rep = list(pool.map(run_rep, *zip(*[(scenario, r, tuple(methods), settings, q_bh, fixed_alpha) for r in jobs])))
    else:
        per_rep = [run_rep(scenario, r, methods, settings, q_bh, fixed_alpha) for r in jobs]
    return ScenarioResult(scenario, per_rep)


RESULT_COLUMNS = ("xi", "variance_spec", "method", "metric", "value", "se")


def write_results_csv(path, results: Sequence[ScenarioResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(RESULT_COLUMNS)
        for res in results:
            out.writerows(res.rows())


# --------------------------------------------------------------------------
# scenario configuration files

_CONFIG_KEYS = {
    "n", "K", "xi", "variance_spec", "null_fraction", "alt_effect_multiplier", "reps", "seed",
    "methods", "normal_burnin", "normal_iters", "polya_burnin", "polya_iters", "q_bh", "fixed_alpha",
}


def load_scenario_config(path) -> dict:
    """Read a JSON scenario file.

    ``xi`` may be a number or a list (one scenario per value); the other
    keys mirror :class:`SimScenario` plus ``methods``, the chain lengths
    ``normal_burnin``, ``normal_iters``, ``polya_burnin``, ``polya_iters``
    and the rejection levels ``q_bh`` and ``fixed_alpha``.
    """
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("scenario config must be a JSON object")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    return cfg


def scenarios_from_config(cfg: dict) -> List[SimScenario]:
    xis = cfg.get("xi", 2.0)
    xis = xis if isinstance(xis, list) else [xis]
    base = {k: cfg[k] for k in ("n", "K", "variance_spec", "null_fraction", "alt_effect_multiplier", "reps", "seed") if k in cfg}
    return [SimScenario(xi=float(x), **base) for x in xis]
