"""Observed trial data and per-stratum, per-arm sample moments.

Every estimator in the package consumes a :class:`Summaries` object: counts,
means, raw second moments and degrees-of-freedom adjusted (co)variances for
each stratum-arm cell. Cells with fewer than two units carry an explicit
``has_var`` flag set to False (their variance slots hold 0.0), cells with no
units carry ``has_mean`` False.
"""
from __future__ import annotations

import csv
import math
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import DataValidationError, MissingTarget


def intern_labels(raw: Iterable[Hashable]) -> tuple[np.ndarray, tuple]:
    """Map raw labels to dense codes 0..K-1 in order of first appearance."""
    index: dict = {}
    codes = []
    for label in raw:
        code = index.get(label)
        if code is None:
            code = index[label] = len(index)
        codes.append(code)
    return np.asarray(codes, dtype=np.int64), tuple(index)


def encode_levels(levels: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Flatten integer level tuples (0-based, one column per margin) to a
    single lexicographic code; the first column varies slowest."""
    levels = np.asarray(levels, dtype=np.int64)
    if levels.ndim == 1:
        levels = levels[:, None]
    code = np.zeros(levels.shape[0], dtype=np.int64)
    for j, size in enumerate(sizes):
        col = levels[:, j]
        if col.size and (col.min() < 0 or col.max() >= size):
            raise DataValidationError(f"margin {j} level outside 0..{size - 1}")
        code = code * size + col
    return code


@dataclass(frozen=True, eq=False)
class Dataset:
    """A two-arm stratified trial.

    ``stratum`` holds dense codes into ``labels``; ``x`` is an (n, p) array of
    adjustment covariates (p may be 0).
    """

    stratum: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    x: np.ndarray
    labels: tuple

    def __post_init__(self):
        n = self.y.shape[0]
        if n < 1:
            raise DataValidationError("dataset has no units")
        if self.stratum.shape != (n,) or self.arm.shape != (n,):
            raise DataValidationError("stratum, arm and y must have equal length")
        if self.x.ndim != 2 or self.x.shape[0] != n:
            raise DataValidationError("covariates must be an (n, p) array")
        if not np.all((self.arm == 0) | (self.arm == 1)):
            raise DataValidationError("arm must be 0 or 1")
        if not np.all(np.isfinite(self.y)):
            raise DataValidationError("outcomes must be finite")
        if not np.all(np.isfinite(self.x)):
            raise DataValidationError("covariates must be finite")
        if self.stratum.min() < 0 or self.stratum.max() >= len(self.labels):
            raise DataValidationError("stratum codes out of range")
        if np.bincount(self.stratum, minlength=len(self.labels)).min() < 1:
            raise DataValidationError("every declared stratum must contain a unit")

    @classmethod
    def from_arrays(cls, strata, arm, y, x=None) -> "Dataset":
        """Build a dataset from raw labels, interning them."""
        codes, labels = intern_labels(strata)
        y = np.asarray(y, dtype=float)
        if x is None:
            x = np.empty((y.shape[0], 0))
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return cls(codes, np.asarray(arm, dtype=np.int64), y, x, labels)

    @classmethod
    def from_codes(cls, codes, arm, y, x=None) -> "Dataset":
        """Build a dataset from integer stratum codes, keeping only observed
        codes (renumbered in increasing code order, labels = original codes)."""
        codes = np.asarray(codes, dtype=np.int64)
        observed, dense = np.unique(codes, return_inverse=True)
        y = np.asarray(y, dtype=float)
        if x is None:
            x = np.empty((y.shape[0], 0))
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return cls(dense.astype(np.int64), np.asarray(arm, dtype=np.int64), y, x,
                   tuple(int(c) for c in observed))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def n_strata(self) -> int:
        return len(self.labels)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.stratum, self.arm, np.asarray(y, dtype=float), self.x,
                       self.labels)


@dataclass(frozen=True)
class StratumSummary:
    """Moments of one stratum; entries indexed by arm. Undefined statistics
    (empty cell, or variance of a single unit) are None."""

    label: Hashable
    n_s: int
    n0_s: int
    n1_s: int
    mean_y: tuple
    mean2_y: tuple
    var_y: tuple
    mean_x: tuple
    cov_xx: tuple
    cov_xy: tuple


class Summaries(Mapping):
    """Cell moments for all strata, stored as arrays indexed ``[arm, stratum]``.

    Behaves as a read-only mapping ``label -> StratumSummary``.
    """

    def __init__(self, labels, n_arm, mean_y, mean2_y, var_y, mean_x=None,
                 cov_xx=None, cov_xy=None):
        self.labels = tuple(labels)
        self.n_arm = np.asarray(n_arm, dtype=np.int64)
        self.mean_y = np.asarray(mean_y, dtype=float)
        self.mean2_y = np.asarray(mean2_y, dtype=float)
        self.var_y = np.asarray(var_y, dtype=float)
        k = len(self.labels)
        self.mean_x = np.zeros((2, k, 0)) if mean_x is None else mean_x
        self.cov_xx = np.zeros((2, k, 0, 0)) if cov_xx is None else cov_xx
        self.cov_xy = np.zeros((2, k, 0)) if cov_xy is None else cov_xy
        self._index = None

    # mapping protocol
    def __getitem__(self, label):
        if self._index is None:
            self._index = {lab: i for i, lab in enumerate(self.labels)}
        return self.stratum(self._index[label])

    def __iter__(self):
        return iter(self.labels)

    def __len__(self):
        return len(self.labels)

    @property
    def n_s(self) -> np.ndarray:
        return self.n_arm.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.n_arm.sum())

    @property
    def p(self) -> int:
        return int(self.mean_x.shape[2])

    @property
    def has_mean(self) -> np.ndarray:
        return self.n_arm >= 1

    @property
    def has_var(self) -> np.ndarray:
        return self.n_arm >= 2

    def stratum(self, s: int) -> StratumSummary:
        def cell(arr, a, ok):
            if not ok[a, s]:
                return None
            v = arr[a, s]
            return float(v) if np.ndim(v) == 0 else v.copy()

        hm, hv = self.has_mean, self.has_var
        return StratumSummary(
            label=self.labels[s],
            n_s=int(self.n_arm[:, s].sum()),
            n0_s=int(self.n_arm[0, s]),
            n1_s=int(self.n_arm[1, s]),
            mean_y=tuple(cell(self.mean_y, a, hm) for a in (0, 1)),
            mean2_y=tuple(cell(self.mean2_y, a, hm) for a in (0, 1)),
            var_y=tuple(cell(self.var_y, a, hv) for a in (0, 1)),
            mean_x=tuple(cell(self.mean_x, a, hm) for a in (0, 1)),
            cov_xx=tuple(cell(self.cov_xx, a, hv) for a in (0, 1)),
            cov_xy=tuple(cell(self.cov_xy, a, hv) for a in (0, 1)),
        )

    def subset(self, keep) -> "Summaries":
        """Restrict to the strata selected by a boolean mask or index array."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return Summaries(
            [self.labels[i] for i in keep],
            self.n_arm[:, keep],
            self.mean_y[:, keep],
            self.mean2_y[:, keep],
            self.var_y[:, keep],
            self.mean_x[:, keep],
            self.cov_xx[:, keep],
            self.cov_xy[:, keep],
        )

    def replace(self, **fields) -> "Summaries":
        current = dict(
            labels=self.labels, n_arm=self.n_arm, mean_y=self.mean_y,
            mean2_y=self.mean2_y, var_y=self.var_y, mean_x=self.mean_x,
            cov_xx=self.cov_xx, cov_xy=self.cov_xy,
        )
        current.update(fields)
        return Summaries(**current)


def _cell_moments(cell, n_cells, counts, v):
    """Two-pass mean, raw second moment and (n-1)-divisor variance per cell."""
    safe = np.maximum(counts, 1)
    mean = np.bincount(cell, weights=v, minlength=n_cells) / safe
    centered = v - mean[cell]
    ss = np.bincount(cell, weights=centered * centered, minlength=n_cells)
    var = np.where(counts >= 2, ss / np.maximum(counts - 1, 1), 0.0)
    mean2 = np.where(counts >= 1, mean * mean + ss / safe, 0.0)
    return mean, mean2, var, centered


def summarize_values(stratum, arm, values, n_strata: int, labels=None) -> Summaries:
    """Outcome-only summaries for a scalar value per unit (no covariates)."""
    k = n_strata
    cell = arm * k + stratum
    counts = np.bincount(cell, minlength=2 * k)
    mean, mean2, var, _ = _cell_moments(cell, 2 * k, counts, values)
    if labels is None:
        labels = range(k)
    return Summaries(labels, counts.reshape(2, k), mean.reshape(2, k),
                     mean2.reshape(2, k), var.reshape(2, k))


def summarize(data: Dataset) -> Summaries:
    """Per-stratum, per-arm moments of the outcome and the covariates."""
    k, p = data.n_strata, data.p
    cell = data.arm * k + data.stratum
    counts = np.bincount(cell, minlength=2 * k)
    mean, mean2, var, yc = _cell_moments(cell, 2 * k, counts, data.y)
    safe = np.maximum(counts, 1)
    denom = np.where(counts >= 2, counts - 1, np.inf)
    mean_x = np.empty((2 * k, p))
    for j in range(p):
        mean_x[:, j] = np.bincount(cell, weights=data.x[:, j], minlength=2 * k) / safe
    xc = data.x - mean_x[cell]
    cov_xx = np.empty((2 * k, p, p))
    cov_xy = np.empty((2 * k, p))
    for j in range(p):
        cov_xy[:, j] = np.bincount(cell, weights=xc[:, j] * yc, minlength=2 * k) / denom
        for l in range(j, p):
            c = np.bincount(cell, weights=xc[:, j] * xc[:, l], minlength=2 * k) / denom
            cov_xx[:, j, l] = c
            cov_xx[:, l, j] = c
    return Summaries(
        data.labels,
        counts.reshape(2, k),
        mean.reshape(2, k),
        mean2.reshape(2, k),
        var.reshape(2, k),
        mean_x.reshape(2, k, p),
        cov_xx.reshape(2, k, p, p),
        cov_xy.reshape(2, k, p),
    )


@dataclass(frozen=True)
class DesignTargets:
    """Target treated probabilities per stratum label, optionally with stratum
    probabilities (simulation only)."""

    pi1: Mapping
    p_s: Mapping | None = None

    def __post_init__(self):
        for label, value in self.pi1.items():
            if not 0.0 < value < 1.0:
                raise DataValidationError(
                    f"target probability for stratum {label!r} must lie in (0, 1)"
                )
        if self.p_s is not None and abs(math.fsum(self.p_s.values()) - 1.0) > 1e-12:
            raise DataValidationError("stratum probabilities must sum to 1")

    @classmethod
    def constant(cls, pi1: float, labels) -> "DesignTargets":
        return cls({label: float(pi1) for label in labels})

    def pi1_for(self, labels) -> np.ndarray:
        out = np.empty(len(labels))
        for i, label in enumerate(labels):
            try:
                out[i] = self.pi1[label]
            except KeyError:
                raise MissingTarget(label) from None
        return out


@dataclass(frozen=True)
class BalanceDiagnostics:
    max_deviation: tuple  # (arm 0, arm 1) of max_s |pi_hat - pi|
    min_arm_count: tuple  # (arm 0, arm 1) of min_s n_a(s)
    frac_ge4: float
    median_size: float
    n_strata: int
    table: list = field(default_factory=list, repr=False)


def assignment_proportions(data: Dataset, targets: DesignTargets) -> BalanceDiagnostics:
    summ = summarize_values(data.stratum, data.arm, data.y, data.n_strata, data.labels)
    pi1 = targets.pi1_for(data.labels)
    n_s = summ.n_s
    pihat1 = summ.n_arm[1] / n_s
    dev1 = float(np.max(np.abs(pihat1 - pi1)))
    dev0 = float(np.max(np.abs((1.0 - pihat1) - (1.0 - pi1))))
    table = [
        {
            "stratum": label,
            "n": int(n_s[i]),
            "n0": int(summ.n_arm[0, i]),
            "n1": int(summ.n_arm[1, i]),
            "pi1": float(pi1[i]),
            "pi1_hat": float(pihat1[i]),
        }
        for i, label in enumerate(data.labels)
    ]
    return BalanceDiagnostics(
        max_deviation=(dev0, dev1),
        min_arm_count=(int(summ.n_arm[0].min()), int(summ.n_arm[1].min())),
        frac_ge4=float(np.mean(n_s >= 4)),
        median_size=float(np.median(n_s)),
        n_strata=data.n_strata,
        table=table,
    )


# CSV ingestion -------------------------------------------------------------

_XCOL = re.compile(r"^x(\d+)$")


def _covariate_columns(header):
    cols = []
    for name in header:
        m = _XCOL.match(name)
        if m:
            cols.append((int(m.group(1)), name))
    cols.sort()
    if [i for i, _ in cols] != list(range(1, len(cols) + 1)):
        raise DataValidationError("covariate columns must be x1..xp without gaps")
    return [name for _, name in cols]


def read_units_csv(path) -> Dataset:
    """Read a trial CSV with columns ``stratum, arm, y, x1..xp``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("stratum", "arm", "y"):
            if required not in header:
                raise DataValidationError(f"missing column {required!r} in {path}")
        xcols = _covariate_columns(header)
        strata, arms, ys, xs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                arm = int(row["arm"])
                y = float(row["y"])
                x = [float(row[c]) for c in xcols]
            except (TypeError, ValueError) as exc:
                raise DataValidationError(f"{path}:{lineno}: {exc}") from None
            if arm not in (0, 1):
                raise DataValidationError(f"{path}:{lineno}: arm must be 0 or 1")
            strata.append(row["stratum"])
            arms.append(arm)
            ys.append(y)
            xs.append(x)
    if not ys:
        raise DataValidationError(f"{path}: no data rows")
    x = np.asarray(xs, dtype=float).reshape(len(ys), len(xcols))
    return Dataset.from_arrays(strata, arms, ys, x)


def read_targets_csv(path) -> DesignTargets:
    """Read a ``stratum, pi1`` CSV."""
    pi1 = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"stratum", "pi1"} <= set(reader.fieldnames):
            raise DataValidationError(f"{path}: expected columns stratum, pi1")
        for lineno, row in enumerate(reader, start=2):
            try:
                pi1[row["stratum"]] = float(row["pi1"])
            except ValueError as exc:
                raise DataValidationError(f"{path}:{lineno}: {exc}") from None
    return DesignTargets(pi1)
