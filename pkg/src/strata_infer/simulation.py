"""Monte Carlo replication engine.

Every replicate draws its units from its own seed substream
(``SeedSequence(master_seed, spawn_key=(r, 0))``) and its assignment from a
second one (``spawn_key=(r, 1)``), so a cell's metrics do not depend on the
number of workers or on the order estimators are listed in. Aggregation is
an ordered reduction over replicate index.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dgp import Model, ModelSpec, analytic_tau, design_targets, draw_units
from .errors import StrataInferError
from .estimators import Method
from .pipeline import SparseMode, analyze
from .randomizers import RandomizerConfig, Scheme, randomize
from .sparse import ClusterMap
from .trial_data import Dataset
from .variance import Family

FAILURE_THRESHOLD = 0.10


@dataclass(frozen=True)
class SimulationSpec:
    model: ModelSpec
    scheme: Scheme = Scheme.SIMPLE
    lam: float = 0.75
    block_size: int = 4
    estimators: tuple = (Method.DIM, Method.ADJ, Method.ADJ_WEIGHTED)
    families: tuple = (Family.NEW_DF, Family.LEGACY)
    # imputation equals the strict estimators whenever every cell has two
    # units, and keeps replicates with a deficient cell instead of dropping them
    sparse_mode: SparseMode = SparseMode.IMPUTATION
    replications: int = 2000
    level: float = 0.95
    master_seed: int = 20240101
    # margins shared by strata of one imputation cluster (None: one cluster,
    # or the prognostic factors for the extreme-strata model)
    cluster_margins: tuple | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")


@dataclass(frozen=True)
class MetricsRow:
    model: str
    setting: int
    sites: int
    n: int
    n_strata: int
    pi: str
    scheme: str
    sparse_mode: str
    method: str
    family: str
    replications: int
    true_tau: float
    bias: float
    sd: float
    rmse: float
    mean_se: float
    cp: float
    cp_se: float
    n_failed: int

    @property
    def failed(self) -> bool:
        return self.n_failed > FAILURE_THRESHOLD * self.replications

    @property
    def sd_defined(self) -> bool:
        return self.replications - self.n_failed >= 2


@dataclass
class ReplicateResult:
    index: int
    values: dict  # (method, family) -> (estimate, se, covered) or None
    median_size: float
    frac_ge4: float


def _workers(requested=None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("STRATA_INFER_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _cluster_map(spec: SimulationSpec) -> ClusterMap | None:
    if spec.sparse_mode is not SparseMode.IMPUTATION:
        return None
    m = spec.model
    shared = spec.cluster_margins
    if shared is None:
        shared = (0, 1) if m.model is Model.EXTREME else ()
    codes = m.stratum_codes
    levels = np.stack(np.unravel_index(codes - m.stratum_base, m.margin_sizes), axis=1)
    if m.model is Model.M2:
        # Model 2 codes use a fixed mixed-radix numbering, not margin order
        return ClusterMap.single([int(c) for c in codes])
    lv = {int(c): tuple(int(v) for v in row) for c, row in zip(codes, levels)}
    return ClusterMap.from_margins(lv.keys(), lv, shared)


class _Context:
    """Per-cell quantities computed once and shared by all replicates."""

    def __init__(self, spec: SimulationSpec):
        self.spec = spec
        self.tau = analytic_tau(spec.model)
        self.targets = design_targets(spec.model)
        self.clusters = _cluster_map(spec)
        self.keys = [(m, f) for m in spec.estimators for f in spec.families]
        self.config = RandomizerConfig(
            spec.scheme,
            targets=self.targets,
            lam=spec.lam,
            block_size=spec.block_size,
            w_overall=0.0,
            w_stratum=1.0 if spec.scheme is Scheme.HU_HU else 0.0,
        )


def run_replicate(ctx: _Context, r: int) -> ReplicateResult:
    spec = ctx.spec
    m = spec.model
    data_ss = np.random.SeedSequence(spec.master_seed, spawn_key=(r, 0))
    assign_ss = np.random.SeedSequence(spec.master_seed, spawn_key=(r, 1))
    draws = draw_units(m, m.n, np.random.Generator(np.random.PCG64(data_ss)))
    cfg = replace(ctx.config, seed=assign_ss)
    arm = randomize(cfg, draws.stratum, draws.margins)
    y = np.where(arm == 1, draws.y1, draws.y0)
    sizes = np.bincount(draws.stratum - m.stratum_base, minlength=m.n_strata)
    values = dict.fromkeys(ctx.keys)
    try:
        data = Dataset.from_codes(draws.stratum, arm, y, draws.x_adjust)
    except StrataInferError:
        return ReplicateResult(r, values, float(np.median(sizes)), float(np.mean(sizes >= 4)))
    # each (estimator, family) pair fails on its own: a singular covariance
    # only affects adjusted estimators, a singleton cell only the legacy family
    for method, family in ctx.keys:
        try:
            res = analyze(data, (method,), (family,), spec.sparse_mode,
                          ctx.targets, ctx.clusters, spec.level)[0]
        except StrataInferError:
            continue
        values[(method, family)] = (res.estimate.tau_hat, res.report.se,
                                    res.ci.covers(ctx.tau))
    return ReplicateResult(r, values, float(np.median(sizes)), float(np.mean(sizes >= 4)))


def _run_chunk(args):
    spec, indices = args
    ctx = _Context(spec)
    return [run_replicate(ctx, r) for r in indices]


def run_replicates(spec: SimulationSpec, workers=None) -> list[ReplicateResult]:
    workers = _workers(workers)
    indices = list(range(spec.replications))
    if workers == 1 or spec.replications < 8:
        return _run_chunk((spec, indices))
    n_chunks = min(len(indices), workers * 4)
    chunks = [indices[i::n_chunks] for i in range(n_chunks)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_run_chunk, [(spec, c) for c in chunks]):
            out.extend(part)
    out.sort(key=lambda rr: rr.index)
    return out


def aggregate(spec: SimulationSpec, reps: Sequence[ReplicateResult], tau: float) -> list[MetricsRow]:
    m = spec.model
    rows = []
    for method in spec.estimators:
        for family in spec.families:
            ok = [rr.values[(method, family)] for rr in reps
                  if rr.values[(method, family)] is not None]
            n_failed = len(reps) - len(ok)
            if ok:
                est = np.array([v[0] for v in ok])
                se = np.array([v[1] for v in ok])
                cov = np.array([v[2] for v in ok], dtype=float)
                err = est - tau
                bias = float(err.mean())
                sd = float(est.std(ddof=1)) if len(ok) >= 2 else math.nan
                rmse = float(np.sqrt(np.mean(err * err)))
                mean_se = float(se.mean())
                cp = float(cov.mean())
                cp_se = math.sqrt(cp * (1.0 - cp) / len(ok))
            else:
                bias = sd = rmse = mean_se = cp = cp_se = math.nan
            rows.append(MetricsRow(
                model=m.model.value, setting=m.setting, sites=m.sites, n=m.n,
                n_strata=m.n_strata, pi=str(m.pi), scheme=spec.scheme.value,
                sparse_mode=spec.sparse_mode.value, method=method.value,
                family=family.value, replications=len(reps), true_tau=tau,
                bias=bias, sd=sd, rmse=rmse, mean_se=mean_se, cp=cp, cp_se=cp_se,
                n_failed=n_failed,
            ))
    return rows


@dataclass
class CellResult:
    rows: list
    replicates: list = field(repr=False)
    median_size: float = math.nan
    frac_ge4: float = math.nan

    def row(self, method: Method, family: Family = Family.NEW_DF) -> MetricsRow:
        for r in self.rows:
            if r.method == method.value and r.family == family.value:
                return r
        raise KeyError((method, family))

    def estimates(self, method: Method, family: Family = Family.NEW_DF) -> np.ndarray:
        return np.array([rr.values[(method, family)][0] if rr.values[(method, family)]
                         else np.nan for rr in self.replicates])

    def ses(self, method: Method, family: Family = Family.NEW_DF) -> np.ndarray:
        return np.array([rr.values[(method, family)][1] if rr.values[(method, family)]
                         else np.nan for rr in self.replicates])


def run_cell(spec: SimulationSpec, workers=None) -> CellResult:
    """Metrics for every (estimator, variance family) pair of one cell."""
    if spec.scheme in (Scheme.MINIMIZATION, Scheme.HU_HU) and spec.model.pi.value != 0.5:
        raise ValueError("minimization is run under equal allocation only")
    reps = run_replicates(spec, workers)
    tau = analytic_tau(spec.model)
    return CellResult(
        aggregate(spec, reps, tau), reps,
        float(np.mean([r.median_size for r in reps])),
        float(np.mean([r.frac_ge4 for r in reps])),
    )


# extreme-strata sweep ------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    sites: int
    n_strata: int
    median_size: float
    frac_ge4: float


def run_extreme_sweep(sites: Sequence[int] = range(1, 11),
                      schemes: Sequence[Scheme] = (Scheme.SIMPLE, Scheme.MINIMIZATION, Scheme.BLOCK),
                      modes: Sequence[SparseMode] = (SparseMode.COMPLETE_CASE, SparseMode.IMPUTATION),
                      estimators: tuple = (Method.DIM, Method.ADJ_WEIGHTED),
                      replications: int = 1000, master_seed: int = 20240101,
                      n: int = 500, workers=None):
    """Stratum-size statistics and metrics rows over a range of site counts.

    Returns ``(points, rows)``; ``points`` holds the figure series of median
    stratum size and share of strata with at least four units.
    """
    points, rows = [], []
    for k in sites:
        model = ModelSpec(Model.EXTREME, sites=k, n=n)
        first = True
        for scheme in schemes:
            for mode in modes:
                spec = SimulationSpec(model, scheme, estimators=estimators,
                                      families=(Family.NEW_DF,), sparse_mode=mode,
                                      replications=replications, master_seed=master_seed)
                res = run_cell(spec, workers)
                rows.extend(res.rows)
                if first:
                    points.append(SweepPoint(k, model.n_strata, res.median_size, res.frac_ge4))
                    first = False
    return points, rows


# output ------------------------------------------------------------------------

ROW_FIELDS = list(MetricsRow.__dataclass_fields__)


def write_metrics_csv(rows: Sequence[MetricsRow], path, metadata: dict | None = None):
    """Long-format CSV; metadata lines are written as leading ``# key=value``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROW_FIELDS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, f)) for f in ROW_FIELDS])


def write_replicates_csv(spec: SimulationSpec, reps: Sequence[ReplicateResult], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["replicate", "method", "family", "estimate", "se", "covered"])
        for rr in reps:
            for (method, family), v in rr.values.items():
                if v is None:
                    writer.writerow([rr.index, method.value, family.value, "", "", ""])
                else:
                    writer.writerow([rr.index, method.value, family.value, _fmt(v[0]),
                                     _fmt(v[1]), int(v[2])])


def write_sweep_csv(points: Sequence[SweepPoint], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sites", "n_strata", "median_size", "frac_ge4"])
        for p in points:
            writer.writerow([p.sites, p.n_strata, _fmt(p.median_size), _fmt(p.frac_ge4)])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def format_table(rows: Sequence[MetricsRow]) -> str:
    """Human-readable table rounded to two decimals."""
    lines = [f"{'scheme':<7}{'mode':<9}{'est':<7}{'fam':<7}{'bias':>7}{'sd':>7}"
             f"{'rmse':>7}{'se':>7}{'cp':>7}{'fail':>6}"]
    for r in rows:
        lines.append(f"{r.scheme:<7}{r.sparse_mode:<9}{r.method:<7}{r.family:<7}"
                     f"{r.bias:7.2f}{r.sd:7.2f}{r.rmse:7.2f}{r.mean_se:7.2f}{r.cp:7.2f}"
                     f"{r.n_failed:6d}")
    return "\n".join(lines)
