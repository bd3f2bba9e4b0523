"""Estimation when many strata have empty or singleton arms.

Two strategies: drop strata lacking the units a statistic needs (complete
case), or borrow a weighted average of the statistic from the other strata
in the same cluster (imputation). With at least two units in every cell both
reduce to the standard estimators.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DataValidationError, InsufficientCell, NoDonor, NoUsableStrata
from .estimators import Method, PointEstimate, fit_beta, strat_diff_in_means
from .trial_data import Dataset, Summaries, summarize, summarize_values
from .variance import (TARGET_FOR, Family, VarianceReport, target_values,
                       variance_from_summaries)


class FlagMode(enum.Enum):
    PER_STRATUM = "stratum"
    PER_STRATUM_ARM = "cell"


@dataclass(frozen=True)
class StratumFlags:
    """Usability flags; shape (K,) per stratum or (2, K) per stratum-arm."""

    ind_est: np.ndarray
    ind_se: np.ndarray
    mode: FlagMode

    @property
    def complete(self) -> bool:
        return bool(np.all(self.ind_se))


def flag_strata(summ: Summaries, mode: FlagMode = FlagMode.PER_STRATUM) -> StratumFlags:
    if mode is FlagMode.PER_STRATUM:
        smallest = summ.n_arm.min(axis=0)
        return StratumFlags(smallest >= 1, smallest >= 2, mode)
    return StratumFlags(summ.n_arm >= 1, summ.n_arm >= 2, mode)


class WeightRule(enum.Enum):
    STRATUM_SHARE = "n_s"  # w_a(s) = n(s)/n
    ARM_SHARE = "n_a"  # w_a(s) = n_a(s)/n_a


@dataclass(frozen=True)
class ClusterMap:
    """Cluster id per stratum label plus optional explicit donor weights.

    ``weights`` maps label -> (w0, w1); when absent the rule gives them.
    """

    cluster: Mapping
    weights: Mapping | None = None
    rule: WeightRule = WeightRule.STRATUM_SHARE

    @classmethod
    def single(cls, labels, rule=WeightRule.STRATUM_SHARE) -> "ClusterMap":
        return cls({label: 0 for label in labels}, rule=rule)

    @classmethod
    def from_margins(cls, labels, levels, shared, rule=WeightRule.STRATUM_SHARE) -> "ClusterMap":
        """Strata agreeing on the margins listed in ``shared`` share a cluster.

        ``levels`` maps label -> tuple of margin levels.
        """
        if not shared:
            return cls.single(labels, rule)
        return cls({label: tuple(levels[label][j] for j in shared) for label in labels},
                   rule=rule)

    def codes(self, labels) -> np.ndarray:
        ids = {}
        out = np.empty(len(labels), dtype=np.int64)
        for i, label in enumerate(labels):
            try:
                c = self.cluster[label]
            except KeyError:
                raise DataValidationError(f"stratum {label!r} has no cluster") from None
            out[i] = ids.setdefault(c, len(ids))
        return out

    def weight_array(self, summ: Summaries) -> np.ndarray:
        if self.weights is not None:
            w = np.empty((2, len(summ)))
            for i, label in enumerate(summ.labels):
                try:
                    w[:, i] = self.weights[label]
                except KeyError:
                    raise DataValidationError(f"stratum {label!r} has no weights") from None
            if np.any(w < 0):
                raise DataValidationError("cluster weights must be nonnegative")
            return w
        if self.rule is WeightRule.STRATUM_SHARE:
            return np.broadcast_to(summ.n_s / summ.n, (2, len(summ))).copy()
        n_a = summ.n_arm.sum(axis=1, keepdims=True)
        return summ.n_arm / np.maximum(n_a, 1)


class ImputedSummaries(Summaries):
    """Summaries whose deficient cells hold cluster-imputed statistics.

    ``within_ratio`` replaces n(s)/n_a(s) in the within-strata variance;
    for empty cells it is the donor-pooled sum n(s') / sum n_a(s').
    """

    def __init__(self, base: Summaries, mean_y, mean2_y, var_y, within_ratio,
                 imputed_mean, imputed_var):
        super().__init__(base.labels, base.n_arm, mean_y, mean2_y, var_y,
                         base.mean_x, base.cov_xx, base.cov_xy)
        self.within_ratio = within_ratio
        self.imputed_mean = imputed_mean
        self.imputed_var = imputed_var

    @property
    def has_mean(self):
        return np.ones(self.n_arm.shape, dtype=bool)

    @property
    def has_var(self):
        return np.ones(self.n_arm.shape, dtype=bool)


def _cluster_average(values, weights, donors, cluster, n_clusters):
    num = np.bincount(cluster, weights=np.where(donors, weights * values, 0.0),
                      minlength=n_clusters)
    den = np.bincount(cluster, weights=np.where(donors, weights, 0.0),
                      minlength=n_clusters)
    return num, den


def impute_summaries(summ: Summaries, flags: StratumFlags, clusters: ClusterMap) -> ImputedSummaries:
    """Fill deficient cells with donor averages inside their cluster.

    Donors are same-cluster cells where the statistic is computed from data;
    deficient cells never act as donors.
    """
    if flags.mode is not FlagMode.PER_STRATUM_ARM:
        raise ValueError("imputation needs per stratum-arm flags")
    cluster = clusters.codes(summ.labels)
    n_clusters = int(cluster.max()) + 1
    w = clusters.weight_array(summ)
    mean_y = summ.mean_y.copy()
    mean2_y = summ.mean2_y.copy()
    var_y = summ.var_y.copy()
    n_s = summ.n_s
    ratio = n_s / np.maximum(summ.n_arm, 1).astype(float)
    for a in (0, 1):
        need_var = ~flags.ind_se[a]
        need_mean = ~flags.ind_est[a]
        if need_var.any():
            donors = flags.ind_se[a]
            num, den = _cluster_average(summ.var_y[a], w[a], donors, cluster, n_clusters)
            _check_donors(summ, a, need_var, den, cluster, "variance")
            var_y[a, need_var] = num[cluster[need_var]] / den[cluster[need_var]]
            pooled_n = np.bincount(cluster, weights=np.where(donors, n_s, 0),
                                   minlength=n_clusters)
            pooled_na = np.bincount(cluster, weights=np.where(donors, summ.n_arm[a], 0),
                                    minlength=n_clusters)
            empty = summ.n_arm[a] == 0
            ratio[a, empty] = pooled_n[cluster[empty]] / pooled_na[cluster[empty]]
        if need_mean.any():
            donors = flags.ind_est[a]
            num, den = _cluster_average(summ.mean_y[a], w[a], donors, cluster, n_clusters)
            _check_donors(summ, a, need_mean, den, cluster, "mean")
            mean_y[a, need_mean] = num[cluster[need_mean]] / den[cluster[need_mean]]
            num2, _ = _cluster_average(summ.mean2_y[a], w[a], donors, cluster, n_clusters)
            mean2_y[a, need_mean] = num2[cluster[need_mean]] / den[cluster[need_mean]]
    return ImputedSummaries(summ, mean_y, mean2_y, var_y, ratio,
                            ~flags.ind_est, ~flags.ind_se)


def _check_donors(summ, a, need, den, cluster, statistic):
    missing = need & (den[cluster] <= 0)
    if missing.any():
        s = int(np.flatnonzero(missing)[0])
        raise NoDonor(summ.labels[s], a, statistic)


def imputed_diff_in_means(summ: ImputedSummaries, method: Method = Method.DIM) -> PointEstimate:
    """Difference in means over all strata with the original n(s)/n weights."""
    n_s = summ.n_s
    tau = float(np.dot(n_s / n_s.sum(), summ.mean_y[1] - summ.mean_y[0]))
    return PointEstimate(tau, method, int(n_s.sum()), len(summ))


def complete_case_subsets(summ: Summaries, flags: StratumFlags):
    """(estimation strata, variance strata) as Summaries subsets."""
    if flags.mode is not FlagMode.PER_STRATUM:
        raise ValueError("complete case needs per stratum flags")
    if not flags.ind_est.any() or not flags.ind_se.any():
        raise NoUsableStrata("no stratum has enough units in both arms")
    return summ.subset(flags.ind_est), summ.subset(flags.ind_se)


def complete_case_dim(summ: Summaries, flags: StratumFlags, method: Method = Method.DIM):
    est_summ, se_summ = complete_case_subsets(summ, flags)
    return strat_diff_in_means(est_summ, method), se_summ


def complete_case_estimate(data: Dataset, flags: StratumFlags | None = None,
                           method: Method = Method.DIM, family: Family = Family.NEW_DF,
                           targets=None, summ: Summaries | None = None):
    """Estimate over strata with both arms non-empty, variance over strata with
    both arms of size two or more.

    Regression coefficients are fitted on the variance strata. The variance of
    the retained strata is divided by the number of units entering the
    estimate.
    """
    if summ is None:
        summ = summarize(data)
    if flags is None:
        flags = flag_strata(summ, FlagMode.PER_STRATUM)
    _, se_full = complete_case_subsets(summ, flags)
    beta = fit_beta(se_full, method, targets)
    values = target_values(data, beta)
    vs = summarize_values(data.stratum, data.arm, values, data.n_strata, data.labels)
    estimate, se_summ = complete_case_dim(vs, flags, method)
    tau_se = strat_diff_in_means(se_summ).tau_hat
    report = variance_from_summaries(se_summ, tau_se, family, TARGET_FOR[method],
                                     n_se=estimate.n_used)
    return estimate, report, beta


def imputed_estimate(data: Dataset, clusters: ClusterMap, flags: StratumFlags | None = None,
                     method: Method = Method.DIM, family: Family = Family.NEW_DF,
                     targets=None, summ: Summaries | None = None):
    """Estimate and variance over all strata with cluster-imputed cell
    statistics where a cell is too small.

    Regression coefficients pool only cells with two or more units.
    """
    if summ is None:
        summ = summarize(data)
    if flags is None:
        flags = flag_strata(summ, FlagMode.PER_STRATUM_ARM)
    if family is Family.LEGACY and not flags.complete:
        bad = np.argwhere(~flags.ind_se)[0]
        raise InsufficientCell(summ.labels[bad[1]], int(bad[0]))
    beta = fit_beta(summ, method, targets, cells=flags.ind_se)
    values = target_values(data, beta)
    vs = summarize_values(data.stratum, data.arm, values, data.n_strata, data.labels)
    imputed = impute_summaries(vs, flags, clusters)
    estimate = imputed_diff_in_means(imputed, method)
    report = variance_from_summaries(imputed, estimate.tau_hat, family, TARGET_FOR[method],
                                     ratio=imputed.within_ratio, check=False)
    return estimate, report, beta


# cluster / weight files --------------------------------------------------------

def read_clusters_csv(path, weights_path=None, rule=WeightRule.STRATUM_SHARE) -> ClusterMap:
    cluster = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"stratum", "cluster"} <= set(reader.fieldnames):
            raise DataValidationError(f"{path}: expected columns stratum, cluster")
        for row in reader:
            cluster[row["stratum"]] = row["cluster"]
    weights = None
    if weights_path is not None:
        weights = {}
        with open(weights_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"stratum", "w0", "w1"} <= set(reader.fieldnames):
                raise DataValidationError(f"{weights_path}: expected columns stratum, w0, w1")
            for lineno, row in enumerate(reader, start=2):
                try:
                    weights[row["stratum"]] = (float(row["w0"]), float(row["w1"]))
                except ValueError as exc:
                    raise DataValidationError(f"{weights_path}:{lineno}: {exc}") from None
    return ClusterMap(cluster, weights, rule)
