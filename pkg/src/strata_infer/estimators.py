"""Point estimators of the average treatment effect.

The stratified difference in means weights within-stratum contrasts by
n(s)/n. The regression-adjusted versions subtract X'beta from the outcome
first, with beta fitted from stratum-centred, degrees-of-freedom adjusted
pooled covariances (no intercept: stratum means absorb it).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import EmptyArm, InsufficientCell, SingularCovariance
from .trial_data import Dataset, DesignTargets, Summaries, summarize_values

RCOND_MIN = 1e-10


class Method(enum.Enum):
    DIM = "dim"
    ADJ = "adj"
    ADJ_WEIGHTED = "adj_w"


class BetaVariant(enum.Enum):
    UNWEIGHTED = "unweighted"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class RegressionCoefficients:
    beta: np.ndarray
    variant: BetaVariant
    per_arm: tuple | None = None


@dataclass(frozen=True)
class PointEstimate:
    tau_hat: float
    method: Method
    n_used: int
    strata_used: int


def strat_diff_in_means(summ: Summaries, method: Method = Method.DIM) -> PointEstimate:
    """sum_s n(s)/n [mean(Y,1,s) - mean(Y,0,s)] over the strata in ``summ``."""
    empty = np.argwhere(~summ.has_mean)
    if empty.size:
        a, s = empty[0]
        raise EmptyArm(summ.labels[s], int(a))
    n_s = summ.n_s
    n = n_s.sum()
    tau = float(np.dot(n_s / n, summ.mean_y[1] - summ.mean_y[0]))
    return PointEstimate(tau, method, int(n), len(summ))


def _require_var_cells(summ: Summaries, cells=None):
    ok = summ.has_var if cells is None else summ.has_var | ~cells
    bad = np.argwhere(~ok)
    if bad.size:
        a, s = bad[0]
        raise InsufficientCell(summ.labels[s], int(a))


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a symmetric PSD system, refusing ill-conditioned matrices."""
    p = a.shape[0]
    if p == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(a)):
        raise SingularCovariance("covariance matrix has non-finite entries")
    scale = np.max(np.abs(a))
    if scale == 0.0 or 1.0 / np.linalg.cond(a) < RCOND_MIN:
        raise SingularCovariance(
            "pooled covariate covariance is singular or ill-conditioned "
            "(covariate constant within cells or collinear)"
        )
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, b, check_finite=False)
    except np.linalg.LinAlgError:
        lu = scipy.linalg.lu_factor(a, check_finite=False)
        return scipy.linalg.lu_solve(lu, b, check_finite=False)


def _cell_mask(summ: Summaries, cells):
    """Cells entering the covariance sums; default is every cell (strict)."""
    if cells is None:
        _require_var_cells(summ)
        return np.ones_like(summ.has_var)
    return cells & summ.has_var


def pooled_covariances(summ: Summaries, weighted: bool, cells=None, n_total=None):
    """Stratum-weighted pooled covariances per arm.

    Returns (Sxx, Sxy) with shapes (2, p, p) and (2, p). ``weighted`` adds the
    n(s)/n_a(s) factor. ``cells`` optionally restricts the sums to a boolean
    [arm, stratum] mask.
    """
    use = _cell_mask(summ, cells)
    n_s = summ.n_s
    n = summ.n if n_total is None else n_total
    w = np.broadcast_to(n_s / n, summ.n_arm.shape).copy()
    if weighted:
        w = w * n_s / np.maximum(summ.n_arm, 1)
    w = np.where(use, w, 0.0)
    sxx = np.einsum("as,asjk->ajk", w, summ.cov_xx)
    sxy = np.einsum("as,asj->aj", w, summ.cov_xy)
    return sxx, sxy


def overall_pi(summ: Summaries, targets: DesignTargets | None) -> tuple:
    """(pi0, pi1) overall; design targets averaged with n(s)/n when given,
    else the observed arm shares."""
    n_s = summ.n_s
    if targets is not None:
        pi1 = float(np.dot(n_s / n_s.sum(), targets.pi1_for(summ.labels)))
    else:
        pi1 = float(summ.n_arm[1].sum() / n_s.sum())
    return 1.0 - pi1, pi1


def fit_unweighted_beta(summ: Summaries, pi_overall=None, targets=None,
                        cells=None) -> RegressionCoefficients:
    """beta = pi1 * beta(0) + pi0 * beta(1), each arm's coefficient from its
    own pooled covariance."""
    if pi_overall is None:
        pi_overall = overall_pi(summ, targets)
    pi0, pi1 = pi_overall
    sxx, sxy = pooled_covariances(summ, weighted=False, cells=cells)
    b0 = solve_spd(sxx[0], sxy[0])
    b1 = solve_spd(sxx[1], sxy[1])
    return RegressionCoefficients(pi1 * b0 + pi0 * b1, BetaVariant.UNWEIGHTED, (b0, b1))


def fit_weighted_beta(summ: Summaries, cells=None) -> RegressionCoefficients:
    """beta* from covariances reweighted by n(s)/n_a(s), pooled over arms."""
    sxx, sxy = pooled_covariances(summ, weighted=True, cells=cells)
    beta = solve_spd(sxx[0] + sxx[1], sxy[0] + sxy[1])
    return RegressionCoefficients(beta, BetaVariant.WEIGHTED)


def residuals(data: Dataset, beta: RegressionCoefficients) -> np.ndarray:
    if data.p == 0:
        return data.y.copy()
    return data.y - data.x @ beta.beta


_METHOD_FOR = {BetaVariant.UNWEIGHTED: Method.ADJ, BetaVariant.WEIGHTED: Method.ADJ_WEIGHTED}


def adjusted_estimate(data: Dataset, beta: RegressionCoefficients) -> PointEstimate:
    """Stratified difference in means of the residuals Y - X'beta."""
    r = residuals(data, beta)
    summ = summarize_values(data.stratum, data.arm, r, data.n_strata, data.labels)
    return strat_diff_in_means(summ, _METHOD_FOR[beta.variant])


def adjusted_estimate_from_summaries(summ: Summaries, beta: RegressionCoefficients) -> float:
    """Same value via tau_hat - sum_s n(s)/n [mean(X,1,s) - mean(X,0,s)]'beta."""
    n_s = summ.n_s
    w = n_s / n_s.sum()
    tau = np.dot(w, summ.mean_y[1] - summ.mean_y[0])
    shift = np.einsum("s,sj->j", w, summ.mean_x[1] - summ.mean_x[0])
    return float(tau - shift @ beta.beta)


def fit_beta(summ: Summaries, method: Method, targets=None, cells=None):
    """Coefficients for ``method`` (None for the unadjusted estimator)."""
    if method is Method.DIM:
        return None
    if method is Method.ADJ:
        return fit_unweighted_beta(summ, targets=targets, cells=cells)
    return fit_weighted_beta(summ, cells=cells)
