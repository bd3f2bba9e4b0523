"""Command line interface: ``randomize``, ``analyze``, ``simulate``, ``diagnose``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the long option names (dashes or underscores). Values given on the
command line win over the file, which wins over built-in defaults. The
effective values are written into each output's metadata.

Exit codes: 0 success, 2 invalid data or arguments, 3 numerical failure,
4 simulation cells over the failure threshold.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .dgp import Model, ModelSpec, PiRegime
from .errors import DataValidationError, SimulationFailure, StrataInferError
from .estimators import Method
from .pipeline import SparseMode, analyze
from .randomizers import RandomizerConfig, Scheme, randomize
from .simulation import (SimulationSpec, run_cell, run_extreme_sweep, write_metrics_csv,
                         write_replicates_csv, write_sweep_csv)
from .sparse import ClusterMap, FlagMode, WeightRule, flag_strata, read_clusters_csv
from .trial_data import (DesignTargets, assignment_proportions, intern_labels,
                         read_targets_csv, read_units_csv, summarize)
from .variance import Family, report_document

EXIT_OK = 0
EXIT_DATA = 2


# config files ---------------------------------------------------------------

def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataValidationError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _csv_list(enum_cls):
    def parse(text):
        try:
            return [enum_cls(v.strip()) for v in str(text).split(",") if v.strip()]
        except ValueError:
            choices = ",".join(e.value for e in enum_cls)
            raise argparse.ArgumentTypeError(f"expected a comma list of {choices}") from None
    return parse


def _enum(enum_cls):
    def parse(text):
        try:
            return enum_cls(str(text).strip().lower())
        except ValueError:
            choices = ",".join(e.value for e in enum_cls)
            raise argparse.ArgumentTypeError(f"expected one of {choices}") from None
    return parse


def _setting(text):
    return int(str(text).lower().lstrip("s"))


def _int_list(text):
    text = str(text)
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strata-infer",
        description="Design and analysis of covariate-adaptive randomized trials.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    def common(p):
        p.add_argument("--config", help="key = value file with option defaults")
        p.add_argument("--out", "-o", help="output path (default: stdout)")

    def targets_opts(p):
        p.add_argument("--targets", help="CSV with columns stratum, pi1")
        p.add_argument("--pi", type=float, help="common treated probability")

    p = sub.add_parser("randomize", help="assign treatment to a roster")
    common(p)
    targets_opts(p)
    p.add_argument("--roster", required=False, help="CSV with a stratum column")
    p.add_argument("--scheme", type=_enum(Scheme), default=Scheme.BLOCK)
    p.add_argument("--margins", default="",
                   help="comma list of roster columns used by minimization")
    p.add_argument("--lam", type=float, default=0.75, help="biased-coin probability")
    p.add_argument("--w-overall", type=float, default=0.0)
    p.add_argument("--w-stratum", type=float, default=0.0)
    p.add_argument("--block-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="estimate the treatment effect from a trial CSV")
    common(p)
    targets_opts(p)
    p.add_argument("--data", help="CSV with columns stratum, arm, y, x1..xp")
    p.add_argument("--methods", type=_csv_list(Method), default="dim,adj,adj_w")
    p.add_argument("--families", type=_csv_list(Family), default="new")
    p.add_argument("--mode", type=_enum(SparseMode), default=SparseMode.STRICT)
    p.add_argument("--clusters", help="CSV with columns stratum, cluster")
    p.add_argument("--cluster-weights", help="CSV with columns stratum, w0, w1")
    p.add_argument("--weight-rule", type=_enum(WeightRule), default=WeightRule.STRATUM_SHARE)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("simulate", help="run a Monte Carlo cell or the extreme-strata sweep")
    common(p)
    p.add_argument("--model", type=_enum(Model), default=Model.M1)
    p.add_argument("--setting", type=_setting, default=1)
    p.add_argument("--sites", type=_int_list, default="1",
                   help="site counts for the extreme model, e.g. 5 or 1-10")
    p.add_argument("--n", type=int, help="sample size (default: the model's)")
    p.add_argument("--pi", default="0.5", help="0.5, grid, grid:lo,hi or odd-even")
    p.add_argument("--mu0", type=float, default=0.0)
    p.add_argument("--mu1", type=float, default=0.0)
    p.add_argument("--rand", type=_csv_list(Scheme), default="sr")
    p.add_argument("--lam", type=float, default=0.75)
    p.add_argument("--block-size", type=int, default=4)
    p.add_argument("--estimators", type=_csv_list(Method), default="dim,adj,adj_w")
    p.add_argument("--families", type=_csv_list(Family), default="new,legacy")
    p.add_argument("--mode", type=_csv_list(SparseMode), default="impute")
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--sweep", action="store_true",
                   help="extreme model: one cell per site count, plus figure data")
    p.add_argument("--replicates-out", help="per-replicate audit CSV (single cell only)")
    p.add_argument("--figure-out", help="sweep stratum-size series CSV")
    p.add_argument("--threads", type=int,
                   default=os.environ.get("STRATA_INFER_THREADS") or os.cpu_count() or 1)

    p = sub.add_parser("diagnose", help="balance and stratum-size diagnostics")
    common(p)
    targets_opts(p)
    p.add_argument("--data", help="CSV with columns stratum, arm, y, x1..xp")
    return parser


def parse_args(argv=None):
    """Parse with ``--config`` values slotted in as subcommand defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise DataValidationError(f"{args.config}: unknown keys {', '.join(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    if isinstance(getattr(args, "sweep", False), str):
        args.sweep = args.sweep.strip().lower() in ("1", "true", "yes", "on")
    return args


OUTPUT_KEYS = ("out", "replicates_out", "figure_out")


def effective(args) -> dict:
    """JSON-friendly view of the parsed options.

    Output destinations are left out so that identical inputs give
    byte-identical files wherever they are written.
    """
    def plain(v):
        if isinstance(v, list):
            return ",".join(str(plain(x)) for x in v)
        if hasattr(v, "value"):
            return v.value
        return v
    return {k: plain(v) for k, v in sorted(vars(args).items()) if k not in OUTPUT_KEYS}


# helpers --------------------------------------------------------------------

def _open_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def _targets(args, labels) -> DesignTargets | None:
    if args.targets:
        return read_targets_csv(args.targets)
    if args.pi is not None:
        return DesignTargets.constant(float(args.pi), labels)
    return None


def _require(value, flag):
    if not value:
        raise DataValidationError(f"{flag} is required")
    return value


def _finite(v):
    return v if isinstance(v, (int, str)) or math.isfinite(v) else None


# subcommands ----------------------------------------------------------------

def cmd_randomize(args) -> int:
    path = _require(args.roster, "--roster")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    if "stratum" not in header:
        raise DataValidationError(f"missing column 'stratum' in {path}")
    if not rows:
        raise DataValidationError(f"{path}: no data rows")
    strata = [r["stratum"] for r in rows]
    unit_ids = [r["unit_id"] for r in rows] if "unit_id" in header else list(range(1, len(rows) + 1))
    margin_cols = [c.strip() for c in args.margins.split(",") if c.strip()]
    margins = None
    if margin_cols:
        missing = [c for c in margin_cols if c not in header]
        if missing:
            raise DataValidationError(f"missing margin columns {missing} in {path}")
        margins = np.column_stack([intern_labels([r[c] for r in rows])[0] for c in margin_cols])
    _, labels = intern_labels(strata)
    config = RandomizerConfig(args.scheme, targets=_targets(args, labels), lam=args.lam,
                              w_overall=args.w_overall, w_stratum=args.w_stratum,
                              block_size=args.block_size, seed=args.seed)
    arm = randomize(config, strata, margins)
    fh, close = _open_out(args.out)
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "stratum", "arm"])
        for uid, s, a in zip(unit_ids, strata, arm):
            writer.writerow([uid, s, int(a)])
    finally:
        if close:
            fh.close()
    return EXIT_OK


def _clusters(args, labels) -> ClusterMap | None:
    if args.mode is not SparseMode.IMPUTATION:
        return None
    if args.clusters:
        return read_clusters_csv(args.clusters, args.cluster_weights, args.weight_rule)
    return ClusterMap.single(labels, args.weight_rule)


def cmd_analyze(args) -> int:
    data = read_units_csv(_require(args.data, "--data"))
    methods = list(args.methods)
    if any(m is not Method.DIM for m in methods) and data.p == 0:
        raise DataValidationError("adjusted estimators need covariate columns x1..xp")
    targets = _targets(args, data.labels)
    results = analyze(data, methods, args.families, args.mode, targets,
                      _clusters(args, data.labels), args.level)
    docs = []
    for res in results:
        doc = {"method": res.estimate.method.value}
        doc.update(report_document(res.estimate, res.report, res.ci))
        if res.beta is not None:
            doc["beta"] = [float(b) for b in res.beta.beta]
        docs.append(doc)
    reduction = {}
    for fam in args.families:
        base = next((r for r in results if r.estimate.method is Method.DIM
                     and r.report.family is fam), None)
        if base is None or base.report.v_total == 0:
            continue
        for r in results:
            if r.report.family is fam and r.estimate.method is not Method.DIM:
                key = f"{r.estimate.method.value}:{fam.value}"
                reduction[key] = 100.0 * (1.0 - r.report.v_total / base.report.v_total)
    out = {"metadata": effective(args), "results": docs, "variance_reduction": reduction}
    _write_json(out, args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    data = read_units_csv(_require(args.data, "--data"))
    targets = _targets(args, data.labels) or DesignTargets.constant(0.5, data.labels)
    diag = assignment_proportions(data, targets)
    flags = flag_strata(summarize(data), FlagMode.PER_STRATUM)
    table = []
    for i, row in enumerate(diag.table):
        row = dict(row)
        row["ind_est"] = int(flags.ind_est[i])
        row["ind_se"] = int(flags.ind_se[i])
        table.append(row)
    out = {
        "metadata": effective(args),
        "n": data.n,
        "n_strata": diag.n_strata,
        "median_size": diag.median_size,
        "frac_ge4": diag.frac_ge4,
        "max_deviation": list(diag.max_deviation),
        "min_arm_count": list(diag.min_arm_count),
        "flagged": [r["stratum"] for r in table if not r["ind_se"]],
        "strata": table,
    }
    _write_json(out, args.out)
    return EXIT_OK


def _write_json(doc, path):
    fh, close = _open_out(path)
    try:
        json.dump(doc, fh, indent=2, default=_finite)
        fh.write("\n")
    finally:
        if close:
            fh.close()


def cmd_simulate(args) -> int:
    pi = PiRegime.parse(args.pi)
    if args.sweep and args.model is not Model.EXTREME:
        raise DataValidationError("--sweep needs --model extreme")
    if args.sweep:
        points, rows = run_extreme_sweep(
            sites=args.sites, schemes=args.rand, modes=args.mode,
            estimators=tuple(args.estimators), replications=args.reps,
            master_seed=args.seed, n=args.n or 500, workers=args.threads)
        if args.figure_out:
            write_sweep_csv(points, args.figure_out)
        reps_dump = None
    else:
        rows, reps_dump = [], None
        sites = args.sites if args.model is Model.EXTREME else [1]
        for k in sites:
            model = ModelSpec(args.model, setting=args.setting, sites=k, n=args.n, pi=pi,
                              mu0=args.mu0, mu1=args.mu1, seed=args.seed)
            for scheme in args.rand:
                for mode in args.mode:
                    spec = SimulationSpec(model, scheme, lam=args.lam,
                                          block_size=args.block_size,
                                          estimators=tuple(args.estimators),
                                          families=tuple(args.families), sparse_mode=mode,
                                          replications=args.reps, level=args.level,
                                          master_seed=args.seed)
                    res = run_cell(spec, args.threads)
                    rows.extend(res.rows)
                    reps_dump = (spec, res.replicates)
        if args.replicates_out and reps_dump is not None:
            write_replicates_csv(*reps_dump, args.replicates_out)
    meta = effective(args)
    meta.pop("threads", None)  # worker count never changes the results
    meta["sd_divisor"] = "R-1"
    meta["rmse_divisor"] = "R"
    if args.out:
        write_metrics_csv(rows, args.out, meta)
    else:
        from .simulation import format_table
        print(format_table(rows))
    failed = [r for r in rows if r.failed]
    if failed:
        r = failed[0]
        raise SimulationFailure(
            f"{len(failed)} cell(s) over the failure threshold, e.g. {r.scheme}/"
            f"{r.method}/{r.family}: {r.n_failed} of {r.replications} replicates failed")
    return EXIT_OK


COMMANDS = {"randomize": cmd_randomize, "analyze": cmd_analyze,
            "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except StrataInferError as exc:
        print(f"strata-infer: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"strata-infer: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
