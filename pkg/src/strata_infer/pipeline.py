"""One call from a dataset to estimates, variances and intervals.

Shared by the command line and the simulation engine, so both route sparse
strata identically.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .estimators import Method, PointEstimate, RegressionCoefficients, fit_beta, strat_diff_in_means
from .errors import InsufficientCell
from .sparse import ClusterMap, FlagMode, complete_case_estimate, flag_strata, imputed_estimate
from .trial_data import Dataset, DesignTargets, summarize, summarize_values
from .variance import (TARGET_FOR, ConfidenceInterval, Family, VarianceReport,
                       confidence_interval, target_values, variance_from_summaries)


class SparseMode(enum.Enum):
    STRICT = "strict"
    COMPLETE_CASE = "complete"
    IMPUTATION = "impute"


@dataclass(frozen=True)
class AnalysisResult:
    estimate: PointEstimate
    report: VarianceReport
    ci: ConfidenceInterval
    beta: RegressionCoefficients | None


def _strict(data, summ, method, families, targets):
    bad = (~summ.has_var).nonzero()
    if bad[0].size:
        raise InsufficientCell(summ.labels[bad[1][0]], int(bad[0][0]))
    beta = fit_beta(summ, method, targets)
    values = target_values(data, beta)
    vs = summarize_values(data.stratum, data.arm, values, data.n_strata, data.labels)
    estimate = strat_diff_in_means(vs, method)
    reports = [variance_from_summaries(vs, estimate.tau_hat, f, TARGET_FOR[method])
               for f in families]
    return estimate, reports, beta


def analyze(data: Dataset, methods: Iterable[Method] = (Method.DIM,),
            families: Iterable[Family] = (Family.NEW_DF,),
            mode: SparseMode = SparseMode.STRICT,
            targets: DesignTargets | None = None,
            clusters: ClusterMap | None = None,
            level: float = 0.95) -> list[AnalysisResult]:
    """Results for every (method, family) pair, methods in the outer loop."""
    families = list(families)
    summ = summarize(data)
    out = []
    if mode is SparseMode.IMPUTATION and clusters is None:
        clusters = ClusterMap.single(data.labels)
    if mode is SparseMode.COMPLETE_CASE:
        flags = flag_strata(summ, FlagMode.PER_STRATUM)
    elif mode is SparseMode.IMPUTATION:
        flags = flag_strata(summ, FlagMode.PER_STRATUM_ARM)
    for method in methods:
        if mode is SparseMode.STRICT:
            estimate, reports, beta = _strict(data, summ, method, families, targets)
        else:
            reports = []
            for family in families:
                if mode is SparseMode.COMPLETE_CASE:
                    estimate, report, beta = complete_case_estimate(
                        data, flags, method, family, targets, summ=summ)
                else:
                    estimate, report, beta = imputed_estimate(
                        data, clusters, flags, method, family, targets, summ=summ)
                reports.append(report)
        for report in reports:
            out.append(AnalysisResult(estimate, report,
                                      confidence_interval(estimate, report, level), beta))
    return out
