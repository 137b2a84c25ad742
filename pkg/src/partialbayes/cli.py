"""Command-line front end.

Subcommands read CSV (or a JSON scenario file), run one pipeline and write a
CSV result plus ``<output>.manifest.json``.  Every option can also be set
through an environment variable ``PBPV_<OPTION>`` (for example
``PBPV_SEED``); explicit flags take precedence.

Exit status is 0 on success, 2 for invalid input or options and 3 for
numerical failures inside a sampler or integrator.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import boundary, dpmm, pbsampler, pvalues, simharness
from .polyatree import PtParams
from .statdist import Subbotin
from .summaries import (
    ConfigSummary,
    NormalSummary,
    summarize_config_array,
    summarize_normal_array,
)

ENV_PREFIX = "PBPV_"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

# chain-length defaults: normal chain, extra joint burn-in, kept draws
NORMAL_BURNIN = 5000
POLYA_BURNIN = 2000
SIM_ITERS = 10000
ANALYSIS_ITERS = 100000


class InputError(ValueError):
    """Malformed input file; the message names the offending line."""


# --------------------------------------------------------------------------
# CSV input


def _read_rows(path) -> tuple:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file (a header row is required)")
    header = [h.strip() for h in rows[0]]
    return header, rows[1:]


def _floats(values, path, line, columns) -> List[float]:
    out = []
    for v, col in zip(values, columns):
        try:
            x = float(v)
        except ValueError:
            raise InputError(f"{path}, line {line}: column {col!r} is not a number: {v!r}") from None
        if not math.isfinite(x):
            raise InputError(f"{path}, line {line}: column {col!r} is not finite")
        out.append(x)
    return out


def _check_width(row, header, path, line):
    if len(row) != len(header):
        raise InputError(f"{path}, line {line}: expected {len(header)} fields, found {len(row)}")


def read_wide_csv(path) -> tuple:
    """``id, z1, ..., zK`` rows; returns ``(ids, z)`` with ``z`` of shape ``(n, K)``."""
    header, rows = _read_rows(path)
    if len(header) < 3 or header[0] != "id":
        raise InputError(f"{path}: wide format needs a header 'id,z1,...,zK' with K >= 2")
    ids, z = [], []
    for line, row in enumerate(rows, start=2):
        _check_width(row, header, path, line)
        ids.append(row[0])
        z.append(_floats(row[1:], path, line, header[1:]))
    if not ids:
        raise InputError(f"{path}: no data rows")
    return ids, np.array(z)


def read_summary_csv(path) -> List[NormalSummary]:
    """``id, t, s2, k`` rows."""
    header, rows = _read_rows(path)
    if header != ["id", "t", "s2", "k"]:
        raise InputError(f"{path}: summary format needs the header 'id,t,s2,k'")
    out = []
    for line, row in enumerate(rows, start=2):
        _check_width(row, header, path, line)
        t, s2, k = _floats(row[1:], path, line, header[1:])
        if k != int(k) or k < 2:
            raise InputError(f"{path}, line {line}: k must be an integer >= 2")
        if s2 < 0:
            raise InputError(f"{path}, line {line}: s2 must be nonnegative")
        out.append(NormalSummary(t, s2, int(k), row[0]))
    if not out:
        raise InputError(f"{path}: no data rows")
    return out


def read_normal_input(path) -> List[NormalSummary]:
    """Summary CSV if the header says so, otherwise wide replicate CSV."""
    header, _ = _read_rows(path)
    if header == ["id", "t", "s2", "k"]:
        return read_summary_csv(path)
    ids, z = read_wide_csv(path)
    t, s2 = summarize_normal_array(z)
    K = z.shape[1]
    return [NormalSummary(float(a), float(b), K, i) for i, a, b in zip(ids, t, s2)]


def read_paired_csv(path) -> pvalues.PairedBiasData:
    header, rows = _read_rows(path)
    cols = ["id", "y1", "y0", "sigma1", "sigma0"]
    if header != cols:
        raise InputError(f"{path}: paired-bias format needs the header {','.join(cols)}")
    ids, vals = [], []
    for line, row in enumerate(rows, start=2):
        _check_width(row, header, path, line)
        v = _floats(row[1:], path, line, cols[1:])
        if v[2] <= 0 or v[3] <= 0:
            raise InputError(f"{path}, line {line}: standard deviations must be positive")
        ids.append(row[0])
        vals.append(v)
    if not vals:
        raise InputError(f"{path}: no data rows")
    a = np.array(vals)
    return pvalues.PairedBiasData(a[:, 0], a[:, 1], a[:, 2], a[:, 3], tuple(ids))


def read_null_draws_csv(path) -> tuple:
    """``id, v, d1, ..., dB`` rows; returns ``(ids, v, draws)``."""
    header, rows = _read_rows(path)
    if len(header) < 3 or header[:2] != ["id", "v"]:
        raise InputError(f"{path}: null-draw format needs a header 'id,v,d1,...,dB'")
    ids, v, draws = [], [], []
    for line, row in enumerate(rows, start=2):
        _check_width(row, header, path, line)
        vals = _floats(row[1:], path, line, header[1:])
        ids.append(row[0])
        v.append(vals[0])
        draws.append(vals[1:])
    if not ids:
        raise InputError(f"{path}: no data rows")
    return ids, np.array(v), np.array(draws)


# --------------------------------------------------------------------------
# options


def _env_default(name: str, cast, fallback=None):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError:
        raise InputError(f"environment variable {ENV_PREFIX}{name.upper()} has an invalid value {raw!r}") from None


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be a nonnegative integer")
    return v


def _unit_interval(s: str) -> float:
    v = float(s)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1]")
    return v


def _add_common(p: argparse.ArgumentParser, methods: Optional[Sequence[str]] = None, need_input: bool = True):
    p.add_argument("--input", required=need_input, help="input CSV file")
    p.add_argument("--output", required=True, help="output CSV file")
    p.add_argument("--seed", type=_nonneg_int, default=None, help="random seed (env PBPV_SEED)")
    p.add_argument("--burnin", type=_nonneg_int, default=None, help="burn-in sweeps of the chain")
    p.add_argument("--iters", type=_positive_int, default=None, help="kept draws")
    p.add_argument("--alpha", type=_unit_interval, default=None, help="level for thresholds")
    p.add_argument("--q-bh", type=_unit_interval, default=None, help="Benjamini-Hochberg level")
    p.add_argument("--config", default=None, help="JSON configuration file")
    p.add_argument("--threads", type=_positive_int, default=None, help="worker processes")
    if methods:
        p.add_argument("--method", choices=methods, default=None, help=f"one of {', '.join(methods)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partialbayes", description="Partially Bayes p-values for replicated measurements.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run simulation scenarios and write metrics")
    _add_common(p, simharness.SIM_METHODS, need_input=False)
    p.add_argument("--polya-burnin", type=_nonneg_int, default=None, help="extra burn-in of the joint chain")
    p.add_argument("--shape-scale", choices=sorted(pbsampler.SHAPE_SCALES), default=None,
                   help="rescaling used by the noise-shape refresh (default anchored)")

    p = sub.add_parser("analyze-normal", help="p-values under normal noise (wide or summary CSV)")
    _add_common(p, ("ttest", "limma", "normal_pb"))
    p.add_argument("--nu0", type=float, default=None, help="moderated-t prior degrees of freedom (fitted if omitted)")
    p.add_argument("--sigma02", type=float, default=None, help="moderated-t prior scale (fitted if omitted)")

    p = sub.add_parser("analyze-polya", help="p-values with an unknown symmetric noise shape (wide CSV)")
    _add_common(p, ("polya_pb", "oracle_config"))
    p.add_argument("--polya-burnin", type=_nonneg_int, default=None, help="extra burn-in of the joint chain")
    p.add_argument("--shape-scale", choices=sorted(pbsampler.SHAPE_SCALES), default=None,
                   help="rescaling used by the noise-shape refresh (default anchored)")
    p.add_argument("--oracle-xi", type=float, default=None, help="Subbotin shape of the known noise (oracle only)")
    p.add_argument("--oracle-variance", type=float, default=None, help="noise variance (oracle only)")

    p = sub.add_parser("boundary", help="smoothed rejection boundary against the sample variance")
    _add_common(p, ("normal_pb", "polya_pb"), need_input=False)
    p.add_argument("--null-draws", default=None, help="CSV 'id,v,d1,...,dB' of null draws; skips the chain")
    p.add_argument("--polya-burnin", type=_nonneg_int, default=None, help="extra burn-in of the joint chain")
    p.add_argument("--shape-scale", choices=sorted(pbsampler.SHAPE_SCALES), default=None,
                   help="rescaling used by the noise-shape refresh (default anchored)")

    p = sub.add_parser("paired-bias", help="paired-bias partially Bayes p-values")
    _add_common(p)
    p.add_argument("--chains", type=_positive_int, default=None, help="independent Gibbs chains")

    p = sub.add_parser("diagnostics", help="run a chain and write its per-iteration diagnostics")
    _add_common(p, ("normal_pb", "polya_pb"))
    p.add_argument("--polya-burnin", type=_nonneg_int, default=None, help="extra burn-in of the joint chain")
    p.add_argument("--shape-scale", choices=sorted(pbsampler.SHAPE_SCALES), default=None,
                   help="rescaling used by the noise-shape refresh (default anchored)")

    p = sub.add_parser("rerun", help="repeat a run recorded in a manifest")
    p.add_argument("manifest", help="manifest JSON written by an earlier run")
    p.add_argument("--output", default=None, help="write to this path instead of the recorded one")
    return parser


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from ``PBPV_*`` environment variables."""
    casts = {
        "seed": int, "burnin": int, "iters": int, "alpha": float, "q_bh": float, "method": str,
        "config": str, "threads": int, "polya_burnin": int, "shape_scale": str, "chains": int, "nu0": float, "sigma02": float,
    }
    for name, cast in casts.items():
        if hasattr(args, name) and getattr(args, name) is None:
            setattr(args, name, _env_default(name, cast))
    if getattr(args, "threads", None) is None:
        args.threads = 1
    return args


def _seed(args, required: bool = False) -> int:
    if args.seed is None:
        if required:
            raise InputError("a seed is required for this command (--seed or PBPV_SEED)")
        return 0
    return args.seed


def _polya_config(args, iters_default: int) -> pbsampler.PolyaChainConfig:
    return pbsampler.PolyaChainConfig(
        burnin=POLYA_BURNIN if args.polya_burnin is None else args.polya_burnin,
        iters=iters_default if args.iters is None else args.iters,
        seed=_seed(args),
        normal_burnin=NORMAL_BURNIN if args.burnin is None else args.burnin,
        shape_scale=getattr(args, "shape_scale", None) or "anchored",
        normal_iters=iters_default if args.iters is None else args.iters,
    )


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> List[str]:
    cfg = simharness.load_scenario_config(args.config) if args.config else {}
    if args.seed is None and "seed" not in cfg:
        raise InputError("simulate needs a seed (--seed, PBPV_SEED or the config's 'seed' key)")
    if args.seed is not None:
        cfg["seed"] = args.seed
    methods = cfg.get("methods", list(simharness.SIM_METHODS))
    if args.method:
        methods = [args.method]
    settings = simharness.SimSettings(
        normal_burnin=args.burnin if args.burnin is not None else cfg.get("normal_burnin", NORMAL_BURNIN),
        normal_iters=args.iters if args.iters is not None else cfg.get("normal_iters", SIM_ITERS),
        polya=pbsampler.PolyaChainConfig(
            burnin=args.polya_burnin if args.polya_burnin is not None else cfg.get("polya_burnin", POLYA_BURNIN),
            iters=args.iters if args.iters is not None else cfg.get("polya_iters", SIM_ITERS),
            shape_scale=getattr(args, "shape_scale", None) or cfg.get("shape_scale", "anchored"),
        ),
    )
    q_bh = args.q_bh if args.q_bh is not None else cfg.get("q_bh", 0.1)
    fixed = args.alpha if args.alpha is not None else cfg.get("fixed_alpha", 0.01)
    results = [
        simharness.run_scenario(sc, methods, settings, q_bh=q_bh, fixed_alpha=fixed, threads=args.threads)
        for sc in simharness.scenarios_from_config(cfg)
    ]
    simharness.write_results_csv(args.output, results)
    return [args.output]


def cmd_analyze_normal(args) -> List[str]:
    summaries = read_normal_input(args.input)
    method = args.method or "normal_pb"
    t = np.array([s.t for s in summaries])
    s2 = np.array([s.s2 for s in summaries])
    k = np.array([s.k for s in summaries])
    ids = [s.id for s in summaries]
    if method == "ttest":
        reports = [pvalues.ttest_pvalue(s) for s in summaries]
    elif method == "limma":
        if (args.nu0 is None) != (args.sigma02 is None):
            raise InputError("give both --nu0 and --sigma02, or neither to fit them")
        nu0, sigma02 = (args.nu0, args.sigma02) if args.nu0 is not None else pvalues.fit_limma_prior(s2, k)
        p = pvalues.limma_pvalue_array(t, s2, k, nu0, sigma02)
        reports = pvalues.reports_from_arrays(ids, p, 0.0, "limma")
    else:
        rng = np.random.default_rng(_seed(args))
        burnin = NORMAL_BURNIN if args.burnin is None else args.burnin
        iters = ANALYSIS_ITERS if args.iters is None else args.iters
        p, se = pvalues.normal_pb_array(t, s2, k, dpmm.DpPrior(), burnin, iters, rng)
        reports = pvalues.reports_from_arrays(ids, p, se, "normal_pb", s2 == 0)
    pvalues.write_pvalues_csv(args.output, reports)
    return [args.output]


def cmd_analyze_polya(args) -> List[str]:
    ids, z = read_wide_csv(args.input)
    zbar, resid = summarize_config_array(z)
    method = args.method or "polya_pb"
    if method == "oracle_config":
        if args.oracle_xi is None or args.oracle_variance is None:
            raise InputError("oracle_config needs --oracle-xi and --oracle-variance")
        law = Subbotin.from_variance(args.oracle_xi, args.oracle_variance)
        reports = [
            pvalues.oracle_config_pvalue(ConfigSummary(float(m), r, i), law.logpdf) for i, m, r in zip(ids, zbar, resid)
        ]
    else:
        cfg = _polya_config(args, ANALYSIS_ITERS)
        rng = np.random.default_rng(cfg.seed)
        p, se, _ = pvalues.polya_pb_array(zbar, resid, cfg, dpmm.DpPrior(), PtParams(), rng)
        reports = pvalues.reports_from_arrays(ids, p, se, "polya_pb")
    pvalues.write_pvalues_csv(args.output, reports)
    return [args.output]


def _chain_null_draws(args, z: np.ndarray) -> tuple:
    """Null draws of the test statistic and ``v = s2`` from a fresh chain."""
    method = args.method or "normal_pb"
    zbar, resid = summarize_config_array(z)
    K = z.shape[1]
    s2 = np.einsum("ij,ij->i", resid, resid) / (K - 1)
    if method == "normal_pb":
        rng = np.random.default_rng(_seed(args))
        iters = SIM_ITERS if args.iters is None else args.iters
        burnin = NORMAL_BURNIN if args.burnin is None else args.burnin
        res = dpmm.run_conjugate_chain(s2, K, dpmm.DpPrior(), burnin, iters, rng, keep_draws=True)
        # null draws of sqrt(K) * mean given each variance draw
        draws = np.sqrt(res.sigma2_draws.T) * rng.standard_normal(res.sigma2_draws.T.shape)
        return s2, draws
    cfg = _polya_config(args, SIM_ITERS)
    rng = np.random.default_rng(cfg.seed)
    res = pbsampler.run_chain(zbar, resid, cfg, dpmm.DpPrior(), PtParams(), rng)
    return s2, res.zbar_null.T


def cmd_boundary(args) -> List[str]:
    alpha = 0.05 if args.alpha is None else args.alpha
    if args.null_draws:
        _, v, draws = read_null_draws_csv(args.null_draws)
    elif args.input:
        _, z = read_wide_csv(args.input)
        v, draws = _chain_null_draws(args, z)
    else:
        raise InputError("boundary needs --input (data) or --null-draws")
    thresholds = boundary.null_quantile_thresholds(draws, alpha)
    fit = boundary.fit_boundary(v, thresholds, alpha)
    boundary.write_boundary_csv(args.output, fit)
    return [args.output]


def cmd_paired_bias(args) -> List[str]:
    d = read_paired_csv(args.input)
    rng = np.random.default_rng(_seed(args))
    reports = pvalues.paired_bias_pb(
        d,
        iters=1000 if args.iters is None else args.iters,
        burnin=1000 if args.burnin is None else args.burnin,
        rng=rng,
        chains=4 if args.chains is None else args.chains,
    )
    pvalues.write_pvalues_csv(args.output, reports)
    return [args.output]


def cmd_diagnostics(args) -> List[str]:
    _, z = read_wide_csv(args.input)
    method = args.method or "polya_pb"
    zbar, resid = summarize_config_array(z)
    K = z.shape[1]
    if method == "normal_pb":
        s2 = np.einsum("ij,ij->i", resid, resid) / (K - 1)
        rng = np.random.default_rng(_seed(args))
        res = dpmm.run_conjugate_chain(
            s2, K, dpmm.DpPrior(),
            NORMAL_BURNIN if args.burnin is None else args.burnin,
            SIM_ITERS if args.iters is None else args.iters,
            rng,
        )
        columns, rows = dpmm.DIAGNOSTIC_COLUMNS, res.diagnostics
    else:
        cfg = _polya_config(args, SIM_ITERS)
        res = pbsampler.run_chain(zbar, resid, cfg, dpmm.DpPrior(), PtParams(), np.random.default_rng(cfg.seed),
                                  keep_draws=False)
        columns, rows = pbsampler.DIAGNOSTIC_COLUMNS, res.diagnostics
    with open(args.output, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(columns)
        for row in rows:
            out.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else int(x) for x in row])
    return [args.output]


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze-normal": cmd_analyze_normal,
    "analyze-polya": cmd_analyze_polya,
    "boundary": cmd_boundary,
    "paired-bias": cmd_paired_bias,
    "diagnostics": cmd_diagnostics,
}


# --------------------------------------------------------------------------
# manifest


def _sha256(path) -> Optional[str]:
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except OSError:
        return None


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(args, argv: Sequence[str], outputs: Sequence[str]) -> str:
    opts = {k: v for k, v in vars(args).items() if k != "command"}
    inputs = {k: _sha256(opts[k]) for k in ("input", "config", "null_draws") if opts.get(k)}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "resolved_options": opts,
        "seed": opts.get("seed"),
        "input_sha256": inputs,
        "outputs": {o: _sha256(o) for o in outputs},
        "versions": _versions(),
    }
    path = f"{args.output}.manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _argv_from_manifest(path, output: Optional[str]) -> List[str]:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    opts = manifest["resolved_options"]
    argv = [manifest["command"]]
    for k, v in sorted(opts.items()):
        if v is None:
            continue
        if k == "output" and output is not None:
            v = output
        argv += [f"--{k.replace('_', '-')}", str(v)]
    return argv


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            return main(_argv_from_manifest(args.manifest, args.output))
        args = _resolve(args)
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args)
        write_manifest(args, argv, outputs)
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"partialbayes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"partialbayes: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
