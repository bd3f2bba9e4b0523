"""Covariate-adaptive treatment assignment.

Batch schemes (simple and stratified block randomization) are pure functions
of ``(strata, targets, seed)``. Sequential schemes (permuted blocks,
minimization and the Hu-Hu generalisation) keep an :class:`AssignmentState`
and must be driven from a single thread.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataValidationError, NonIntegralBlock
from .trial_data import DesignTargets, intern_labels


class Scheme(enum.Enum):
    SIMPLE = "sr"
    BLOCK = "sbr"
    PERMUTED_BLOCK = "pbr"
    MINIMIZATION = "min"
    HU_HU = "huhu"


@dataclass(frozen=True)
class RandomizerConfig:
    scheme: Scheme
    targets: DesignTargets | None = None
    lam: float = 0.75
    margin_weights: tuple | None = None
    w_overall: float = 0.0
    w_stratum: float = 0.0
    block_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.lam <= 1.0:
            raise DataValidationError("biased-coin probability must lie in [1/2, 1]")
        weights = list(self.margin_weights or ()) + [self.w_overall, self.w_stratum]
        if any(w < 0 for w in weights):
            raise DataValidationError("imbalance weights must be nonnegative")
        if self.scheme is Scheme.HU_HU and not any(w > 0 for w in weights):
            raise DataValidationError("imbalance weights must not all be zero")
        if self.scheme is Scheme.PERMUTED_BLOCK and (
            self.block_size < 2 or self.block_size % 2
        ):
            raise DataValidationError("block size must be a positive even number")


def _generator(seed) -> np.random.Generator:
    # Philox is counter based: unit i always consumes the i-th draw.
    return np.random.Generator(np.random.Philox(seed))


def _stratum_pi(strata, targets: DesignTargets):
    codes, labels = intern_labels(strata)
    return codes, targets.pi1_for(labels)[codes]


def simple_randomize(strata: Sequence, targets: DesignTargets, seed) -> np.ndarray:
    """Independent Bernoulli(pi1(s)) assignment for every unit."""
    _, pi = _stratum_pi(strata, targets)
    u = _generator(seed).random(len(pi))
    return (u < pi).astype(np.int64)


def stratified_block_randomize(strata: Sequence, targets: DesignTargets, seed) -> np.ndarray:
    """Assign exactly floor(pi1(s) n(s)) treated units per stratum, the treated
    subset uniform over all subsets of that size."""
    codes, pi = _stratum_pi(strata, targets)
    return _block_assign(codes, pi, _generator(seed))


def _block_assign(codes, pi_unit, rng):
    n = len(codes)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    sizes = np.bincount(codes)
    pi_s = np.zeros(len(sizes))
    pi_s[codes] = pi_unit
    # float guard: pi*n(s) that should be integral may land just below it
    n1 = np.floor(pi_s * sizes + 1e-9).astype(np.int64)
    keys = rng.random(n)
    order = np.lexsort((keys, codes))
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n) - starts[codes[order]]
    return (rank < n1[codes]).astype(np.int64)


class PermutedBlockRandomizer:
    """Sequential stratified permuted-block randomization.

    Each stratum draws shuffled blocks of ``block_size`` containing exactly
    ``block_size * pi1(s)`` treated slots.
    """

    def __init__(self, targets: DesignTargets, block_size: int, seed):
        if block_size < 1:
            raise DataValidationError("block size must be positive")
        self.targets = targets
        self.block_size = block_size
        self.rng = _generator(seed)
        self._pending: dict = {}
        self._n_treated: dict = {}

    def _treated_per_block(self, stratum) -> int:
        pi = float(self.targets.pi1_for([stratum])[0])
        ones = pi * self.block_size
        if abs(ones - round(ones)) > 1e-9:
            raise NonIntegralBlock(
                f"block size {self.block_size} times pi1={pi} for stratum "
                f"{stratum!r} is not an integer"
            )
        return int(round(ones))

    def assign(self, stratum) -> int:
        queue = self._pending.get(stratum)
        if not queue:
            ones = self._treated_per_block(stratum)
            block = [1] * ones + [0] * (self.block_size - ones)
            self.rng.shuffle(block)
            queue = self._pending[stratum] = block
        return queue.pop()


def permuted_block_randomize(strata: Sequence, targets: DesignTargets, block_size: int,
                             seed) -> np.ndarray:
    pbr = PermutedBlockRandomizer(targets, block_size, seed)
    return np.array([pbr.assign(s) for s in strata], dtype=np.int64)


@dataclass
class AssignmentState:
    """Sufficient statistics of the assignment history.

    All imbalance counters store (treated - control) so that the sign rule can
    be read off directly; ``counts`` keeps per-arm totals.
    """

    margin_diff: list = field(default_factory=list)  # one dict per margin
    stratum_diff: dict = field(default_factory=dict)
    overall_diff: int = 0
    counts: list = field(default_factory=lambda: [0, 0])

    @property
    def assigned(self) -> int:
        return self.counts[0] + self.counts[1]

    def _ensure(self, n_margins):
        while len(self.margin_diff) < n_margins:
            self.margin_diff.append({})

    def record(self, margins, stratum, arm: int):
        self._ensure(len(margins))
        step = 1 if arm == 1 else -1
        for j, level in enumerate(margins):
            d = self.margin_diff[j]
            d[level] = d.get(level, 0) + step
        if stratum is not None:
            self.stratum_diff[stratum] = self.stratum_diff.get(stratum, 0) + step
        self.overall_diff += step
        self.counts[arm] += 1


def _weights(config: RandomizerConfig, n_margins: int):
    if config.margin_weights is None:
        return (1.0,) * n_margins
    if len(config.margin_weights) != n_margins:
        raise DataValidationError("one margin weight per margin required")
    return config.margin_weights


def minimization_imbalance(state: AssignmentState, margins, config) -> float:
    """Weighted sum of treated-minus-control counts at the unit's levels."""
    w = _weights(config, len(margins))
    state._ensure(len(margins))
    return math.fsum(w[j] * state.margin_diff[j].get(level, 0)
                     for j, level in enumerate(margins))


def hu_hu_imbalance(state: AssignmentState, margins, stratum, config) -> float:
    w = _weights(config, len(margins)) if margins else ()
    state._ensure(len(margins))
    total = config.w_overall * state.overall_diff
    total += math.fsum(w[j] * state.margin_diff[j].get(level, 0)
                       for j, level in enumerate(margins))
    total += config.w_stratum * state.stratum_diff.get(stratum, 0)
    return total


def biased_coin_probability(imbalance: float, lam: float) -> float:
    """P(arm = 1) given the current imbalance."""
    if imbalance == 0:
        return 0.5
    return lam if imbalance < 0 else 1.0 - lam


def minimization_assign(state, margins, config, rng, stratum=None) -> int:
    imb = minimization_imbalance(state, margins, config)
    arm = int(rng.random() < biased_coin_probability(imb, config.lam))
    state.record(margins, stratum, arm)
    return arm


def hu_hu_assign(state, margins, stratum, config, rng) -> int:
    imb = hu_hu_imbalance(state, margins, stratum, config)
    arm = int(rng.random() < biased_coin_probability(imb, config.lam))
    state.record(margins, stratum, arm)
    return arm


def _check_equal_allocation(config: RandomizerConfig, strata):
    if config.targets is None:
        return
    _, labels = intern_labels(strata)
    pi = config.targets.pi1_for(labels)
    if np.any(np.abs(pi - 0.5) > 1e-12):
        raise DataValidationError("minimization supports equal allocation (pi1 = 1/2) only")


def minimize_sequence(margins: np.ndarray, config: RandomizerConfig, strata=None) -> np.ndarray:
    """Run minimization (or Hu-Hu) over units in arrival order.

    ``margins`` is an (n, J) array of integer levels, one column per margin.
    """
    margins = np.asarray(margins, dtype=np.int64)
    if margins.ndim == 1:
        margins = margins[:, None]
    n, n_margins = margins.shape
    if strata is not None:
        _check_equal_allocation(config, strata)
    w = np.asarray(_weights(config, n_margins), dtype=float)
    lam = config.lam
    u = _generator(config.seed).random(n)
    huhu = config.scheme is Scheme.HU_HU
    if huhu:
        if strata is None:
            raise DataValidationError("Hu-Hu randomization needs stratum labels")
        s_codes, _ = intern_labels(strata)
        s_diff = np.zeros(int(s_codes.max()) + 1 if n else 0, dtype=np.int64)
    # dense per-margin difference tables keep the loop cheap
    tables = [np.zeros(int(margins[:, j].max()) + 1 if n else 0, dtype=np.int64)
              for j in range(n_margins)]
    w_list = w.tolist()
    overall = 0
    arms = np.empty(n, dtype=np.int64)
    rows = margins.tolist()
    for i in range(n):
        row = rows[i]
        imb = 0.0
        for j in range(n_margins):
            imb += w_list[j] * tables[j][row[j]]
        if huhu:
            imb += config.w_overall * overall + config.w_stratum * s_diff[s_codes[i]]
        if imb == 0:
            prob = 0.5
        elif imb < 0:
            prob = lam
        else:
            prob = 1.0 - lam
        arm = 1 if u[i] < prob else 0
        step = 1 if arm else -1
        for j in range(n_margins):
            tables[j][row[j]] += step
        if huhu:
            s_diff[s_codes[i]] += step
        overall += step
        arms[i] = arm
    return arms


def randomize(config: RandomizerConfig, strata: Sequence, margins=None) -> np.ndarray:
    """Assign a full roster under ``config.scheme``."""
    scheme = config.scheme
    if scheme in (Scheme.SIMPLE, Scheme.BLOCK, Scheme.PERMUTED_BLOCK) and config.targets is None:
        raise DataValidationError(f"scheme {scheme.value} requires target probabilities")
    if scheme is Scheme.SIMPLE:
        return simple_randomize(strata, config.targets, config.seed)
    if scheme is Scheme.BLOCK:
        return stratified_block_randomize(strata, config.targets, config.seed)
    if scheme is Scheme.PERMUTED_BLOCK:
        return permuted_block_randomize(strata, config.targets, config.block_size,
                                        config.seed)
    if margins is None:
        codes, _ = intern_labels(strata)
        margins = codes[:, None]
    return minimize_sequence(margins, config, strata)
