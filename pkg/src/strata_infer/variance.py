"""Variance estimation and normal-approximation confidence intervals.

Two families are provided. ``NEW_DF`` uses (n_a(s) - 1)-divisor cell
variances in both the within and the between components; ``LEGACY`` is the
older estimator without that correction. On any dataset with every cell of
size two or more the two totals differ by exactly

    sum_s n(s)/n [var(1,s) n0(s)/n1(s)^2 + var(0,s) n1(s)/n0(s)^2]

(see :func:`df_gap`), so the new family is never smaller.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientCell
from .estimators import Method, PointEstimate, RegressionCoefficients, residuals
from .trial_data import Dataset, Summaries, summarize_values


class Family(enum.Enum):
    NEW_DF = "new"
    LEGACY = "legacy"


class Target(enum.Enum):
    Y = "y"
    RESID_UNWEIGHTED = "resid"
    RESID_WEIGHTED = "resid_w"


TARGET_FOR = {
    Method.DIM: Target.Y,
    Method.ADJ: Target.RESID_UNWEIGHTED,
    Method.ADJ_WEIGHTED: Target.RESID_WEIGHTED,
}


@dataclass(frozen=True)
class VarianceReport:
    v_between_raw: float
    v_between: float  # after truncation at zero
    v_within: tuple
    v_total: float
    se: float
    family: Family
    target: Target
    n: int

    @property
    def v_total_raw(self) -> float:
        return self.v_between_raw + self.v_within[0] + self.v_within[1]


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _check_cells(summ: Summaries, arms=(0, 1)):
    for a in arms:
        bad = np.flatnonzero(~summ.has_var[a])
        if bad.size:
            raise InsufficientCell(summ.labels[bad[0]], a)


def _weights(summ: Summaries) -> np.ndarray:
    n_s = summ.n_s
    return n_s / n_s.sum()


def _ratio(summ: Summaries, a: int, ratio):
    if ratio is not None:
        return ratio[a]
    return summ.n_s / summ.n_arm[a]


def v_within(summ: Summaries, a: int, ratio=None, check=True) -> float:
    """sum_s n(s)/n * n(s)/n_a(s) * var(f,a,s).

    ``ratio`` overrides the n(s)/n_a(s) factor per [arm, stratum].
    """
    if check:
        _check_cells(summ, (a,))
    return float(np.dot(_weights(summ), _ratio(summ, a, ratio) * summ.var_y[a]))


def v_between(summ: Summaries, tau_hat: float, check=True) -> float:
    """Between-strata variance of the stratum effects, corrected for the
    sampling noise of the cell means. May be negative in finite samples."""
    if check:
        _check_cells(summ)
    w = _weights(summ)
    m2_minus_var = (summ.mean2_y - summ.var_y).sum(axis=0)
    cross = summ.mean_y[0] * summ.mean_y[1]
    return float(np.dot(w, m2_minus_var) - 2.0 * np.dot(w, cross) - tau_hat * tau_hat)


def legacy_between(summ: Summaries, tau_hat: float) -> float:
    d = summ.mean_y[1] - summ.mean_y[0] - tau_hat
    return float(np.dot(_weights(summ), d * d))


def legacy_within(summ: Summaries, a: int) -> float:
    _check_cells(summ, (a,))
    n_a = summ.n_arm[a]
    factor = (n_a - 1) / n_a * summ.n_s / n_a
    return float(np.dot(_weights(summ), factor * summ.var_y[a]))


def df_gap(summ: Summaries) -> float:
    """Closed-form difference between the new and the legacy total."""
    _check_cells(summ)
    n0, n1 = summ.n_arm
    term = summ.var_y[1] * n0 / n1**2 + summ.var_y[0] * n1 / n0**2
    return float(np.dot(_weights(summ), term))


def _assemble(vb_raw, vw, family, target, n_se) -> VarianceReport:
    vb = max(vb_raw, 0.0)
    total = vb + vw[0] + vw[1]
    return VarianceReport(vb_raw, vb, tuple(vw), total, math.sqrt(total / n_se),
                          family, target, int(n_se))


def variance_from_summaries(summ: Summaries, tau_hat: float, family: Family,
                            target: Target = Target.Y, n_se=None, ratio=None,
                            check=True) -> VarianceReport:
    """Variance report for summaries of the target variable.

    ``tau_hat`` must be the stratified difference in means of the same
    variable over the same strata. ``n_se`` is the sample size dividing the
    asymptotic variance (default: units in ``summ``).
    """
    n_se = summ.n if n_se is None else n_se
    if family is Family.NEW_DF:
        vw = (v_within(summ, 0, ratio, check), v_within(summ, 1, ratio, check))
        vb = v_between(summ, tau_hat, check)
    else:
        vw = (legacy_within(summ, 0), legacy_within(summ, 1))
        vb = legacy_between(summ, tau_hat)
    return _assemble(vb, vw, family, target, n_se)


def legacy_variance(summ: Summaries, tau_hat: float, target: Target = Target.Y) -> VarianceReport:
    return variance_from_summaries(summ, tau_hat, Family.LEGACY, target)


def target_values(data: Dataset, beta: RegressionCoefficients | None) -> np.ndarray:
    return data.y if beta is None else residuals(data, beta)


def variance_report(data: Dataset, estimate: PointEstimate, family: Family,
                    beta: RegressionCoefficients | None = None) -> VarianceReport:
    """Variance of ``estimate``; residual targets use ``beta``."""
    if (beta is None) != (estimate.method is Method.DIM):
        raise ValueError("coefficients required exactly for adjusted estimates")
    values = target_values(data, beta)
    summ = summarize_values(data.stratum, data.arm, values, data.n_strata, data.labels)
    return variance_from_summaries(summ, estimate.tau_hat, family,
                                   TARGET_FOR[estimate.method])


# normal quantile ------------------------------------------------------------

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    Acklam's rational approximation (relative error about 1e-9) followed by one
    Halley step against ``math.erfc``, which brings it to machine precision.
    """
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ValueError("probability must lie in [0, 1]")
    if p > 0.5:
        # 1 - p is exact here, and the lower tail avoids cancellation near 1
        return -normal_quantile(1.0 - p)
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def confidence_interval(estimate, report: VarianceReport, level: float = 0.95) -> ConfidenceInterval:
    tau = estimate.tau_hat if isinstance(estimate, PointEstimate) else float(estimate)
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    half = normal_quantile((1.0 + level) / 2.0) * report.se
    return ConfidenceInterval(tau - half, tau + half, level)


def report_document(estimate: PointEstimate, report: VarianceReport,
                    ci: ConfidenceInterval) -> dict:
    """Flat key/value serialization of one estimate."""
    return {
        "estimate": estimate.tau_hat,
        "se": report.se,
        "ci_lower": ci.lower,
        "ci_upper": ci.upper,
        "v_between_raw": report.v_between_raw,
        "v_between_used": report.v_between,
        "v_within_0": report.v_within[0],
        "v_within_1": report.v_within[1],
        "family": report.family.value,
        "target": report.target.value,
        "n": estimate.n_used,
        "strata": estimate.strata_used,
    }
