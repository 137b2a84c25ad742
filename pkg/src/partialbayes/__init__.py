"""Partially Bayes p-values for many parallel hypothesis tests.

Nuisance parameters (variances, the shape of the noise distribution) are
integrated out under a posterior learned jointly from all units, while each
unit's primary parameter is tested in the usual frequentist way.
"""
from __future__ import annotations
from .boundary import BoundaryFit, fit_boundary, null_quantile_thresholds, predict
from .dpmm import DpPrior, DpState, run_conjugate_chain
from .pbsampler import PolyaChainConfig, run_chain
from .polyatree import PtParams, PtRealization, SymmPtDensity
from .pvalues import (
    PairedBiasData,
    PValueReport,
    limma_pvalue,
    normal_pb_pvalues,
    oracle_config_pvalue,
    oracle_known_sigma,
    paired_bias_pb,
    polya_pb_pvalues,
    ttest_pvalue,
)
from .simharness import SimScenario, bh_threshold, compute_metrics, generate, run_scenario
from .summaries import ConfigSummary, NormalSummary, UnitDataset, summarize_config, summarize_normal

__all__ = [
    "BoundaryFit", "ConfigSummary", "DpPrior", "DpState", "NormalSummary", "PValueReport", "PairedBiasData",
    "PolyaChainConfig", "PtParams", "PtRealization", "SimScenario", "SymmPtDensity", "UnitDataset",
    "bh_threshold", "compute_metrics", "fit_boundary", "generate", "limma_pvalue", "normal_pb_pvalues",
    "null_quantile_thresholds", "oracle_config_pvalue", "oracle_known_sigma", "paired_bias_pb",
    "polya_pb_pvalues", "predict", "run_chain", "run_conjugate_chain", "run_scenario", "summarize_config",
    "summarize_normal", "ttest_pvalue",
]
