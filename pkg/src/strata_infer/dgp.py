"""Simulation data-generating processes.

Potential outcomes follow Y(a) = mu_a + g_a(X) + sigma_a(X) * eps(a) with
standard normal noise. Three models come with three settings each (25, 50
and 100 strata at n = 500, 1500, 4000) and an extreme-strata model crosses
two prognostic factors with a variable number of sites.

Stratum codes are lexicographic encodings of the margin levels (0-based)
except in Model 2, whose outcome depends on the parity of the 1-based
stratum number; there the code *is* that number.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .trial_data import DesignTargets, encode_levels


class Model(enum.Enum):
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"
    EXTREME = "extreme"


class PiKind(enum.Enum):
    EQUAL = "equal"
    GRID = "grid"
    ODD_EVEN = "odd-even"


@dataclass(frozen=True)
class PiRegime:
    kind: PiKind = PiKind.EQUAL
    value: float = 0.5
    lo: float = 0.2
    hi: float = 0.8

    @classmethod
    def parse(cls, text: str) -> "PiRegime":
        text = text.strip().lower()
        if text in ("odd-even", "oddeven"):
            return cls(PiKind.ODD_EVEN)
        if text.startswith("grid"):
            parts = text.split(":")[1:]
            if parts:
                lo, hi = (float(v) for v in parts[0].split(","))
                return cls(PiKind.GRID, lo=lo, hi=hi)
            return cls(PiKind.GRID)
        return cls(PiKind.EQUAL, value=float(text))

    def __str__(self):
        if self.kind is PiKind.EQUAL:
            return f"{self.value:g}"
        if self.kind is PiKind.GRID:
            return f"grid:{self.lo:g},{self.hi:g}"
        return "odd-even"


SETTING_SIZES = {1: (25, 500), 2: (50, 1500), 3: (100, 4000)}

M1_BETA = np.array([2.0, 8.0, 10.0, 3.0, 6.0])
M2_BETA0 = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
M2_BETA1 = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
M3_BETA = np.array([20.0, 7.0, 5.0, 6.0])
EXTREME_BETA0 = np.array([2.0, 8.0, 10.0, 3.0, 6.0])
EXTREME_BETA1 = np.array([6.0, 3.0, 10.0, 8.0, 2.0])

# Quartiles of 5 * Beta(2, 2): solutions of 3u^2 - 2u^3 = q, u = x / 5.
M2_X1_QUARTILES = (1.6317591116653485, 2.5, 3.3682408883346513)
M2_X5_SD = 5.0  # N(0, 5) read as standard deviation 5


@dataclass(frozen=True)
class ModelSpec:
    model: Model
    setting: int = 1
    sites: int = 1
    n: int | None = None
    pi: PiRegime = field(default_factory=PiRegime)
    mu0: float = 0.0
    mu1: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.model is Model.EXTREME:
            if not 1 <= self.sites:
                raise ValueError("sites must be positive")
        elif self.setting not in SETTING_SIZES:
            raise ValueError("setting must be 1, 2 or 3")
        if self.n is None:
            object.__setattr__(self, "n", self.default_n)

    @property
    def default_n(self) -> int:
        return 500 if self.model is Model.EXTREME else SETTING_SIZES[self.setting][1]

    @property
    def margin_sizes(self) -> tuple:
        m, s = self.model, self.setting
        if m is Model.M1:
            return {1: (5, 5), 2: (2, 5, 5), 3: (2, 10, 5)}[s]
        if m is Model.M2:
            return {1: (5, 5), 2: (5, 5, 2), 3: (5, 5, 4)}[s]
        if m is Model.M3:
            return {1: (5, 5), 2: (2, 5, 5), 3: (4, 5, 5)}[s]
        return (2, 5, self.sites)

    @property
    def n_strata(self) -> int:
        return int(np.prod(self.margin_sizes))

    @property
    def stratum_base(self) -> int:
        return 1 if self.model is Model.M2 else 0

    @property
    def stratum_codes(self) -> np.ndarray:
        return np.arange(self.n_strata) + self.stratum_base

    def to_config(self) -> dict:
        return {
            "model": self.model.value,
            "setting": self.setting,
            "sites": self.sites,
            "n": self.n,
            "pi": str(self.pi),
            "mu0": self.mu0,
            "mu1": self.mu1,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelSpec":
        return cls(
            model=Model(str(cfg["model"]).lower()),
            setting=int(cfg.get("setting", 1)),
            sites=int(cfg.get("sites", 1)),
            n=int(cfg["n"]) if cfg.get("n") not in (None, "") else None,
            pi=PiRegime.parse(str(cfg.get("pi", "0.5"))),
            mu0=float(cfg.get("mu0", 0.0)),
            mu1=float(cfg.get("mu1", 0.0)),
            seed=int(cfg.get("seed", 0)),
        )


@dataclass(frozen=True)
class Draws:
    """A batch of units: potential outcomes, stratum codes, adjustment
    covariates and 0-based margin levels (one column per margin)."""

    y0: np.ndarray
    y1: np.ndarray
    stratum: np.ndarray
    x_adjust: np.ndarray
    margins: np.ndarray

    def __len__(self):
        return self.y0.shape[0]


@dataclass(frozen=True)
class PotentialDraw:
    y0: float
    y1: float
    stratum: int
    x_adjust: np.ndarray
    margins: tuple


def _ceil_level(v, size):
    # ceil(.) maps (k-1, k] to k; the boundary value 0 has probability zero
    return np.clip(np.ceil(v).astype(np.int64), 1, size) - 1


def _draw_m1(spec, n, rng):
    x1 = rng.beta(2.0, 2.0, n)
    x2 = rng.integers(1, 3, n)
    x3 = rng.uniform(-2.0, 3.0, n)
    x4 = rng.integers(1, 6, n)
    x5 = rng.standard_normal(n)
    e0 = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    g = M1_BETA[0] * x1 + M1_BETA[1] * x2 + M1_BETA[2] * x3 + M1_BETA[3] * x4 + M1_BETA[4] * x5
    y0 = spec.mu0 + g + 1.0 * e0
    y1 = spec.mu1 + g + 2.0 * e1
    if spec.setting == 1:
        margins = np.column_stack([_ceil_level(x3 + 2.0, 5), x4 - 1])
    elif spec.setting == 2:
        margins = np.column_stack([x2 - 1, _ceil_level(x3 + 2.0, 5), x4 - 1])
    else:
        margins = np.column_stack([x2 - 1, _ceil_level(2.0 * (x3 + 2.0), 10), x4 - 1])
    code = encode_levels(margins, spec.margin_sizes)
    return Draws(y0, y1, code, np.column_stack([x1, x3]), margins)


def m2_x1_level(x1, setting):
    if setting == 2:
        return (x1 > M2_X1_QUARTILES[1]).astype(np.int64)
    return np.searchsorted(np.asarray(M2_X1_QUARTILES), x1, side="left").astype(np.int64)


def _draw_m2(spec, n, rng):
    x1 = 5.0 * rng.beta(2.0, 2.0, n)
    x2 = rng.integers(1, 6, n)
    x3 = rng.uniform(-2.0, 3.0, n)
    x4 = rng.integers(1, 6, n)
    x5 = M2_X5_SD * rng.standard_normal(n)
    e0 = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    if spec.setting == 1:
        s = x2 + 5 * (x4 - 1)
        margins = np.column_stack([x2 - 1, x4 - 1])
    else:
        levels = 2 if spec.setting == 2 else 4
        x1s = m2_x1_level(x1, spec.setting) + 1
        s = x1s + levels * (x2 - 1) + levels * 5 * (x4 - 1)
        margins = np.column_stack([x2 - 1, x4 - 1, x1s - 1])
    x = np.column_stack([x1, x2, x3, x4, x5])
    odd = (s % 2 == 1)[:, None]
    g0 = np.sum(np.where(odd, M2_BETA0, M2_BETA1) * x, axis=1)
    g1 = x @ M2_BETA1
    y0 = spec.mu0 + g0 + e0
    y1 = spec.mu1 + g1 + e1
    return Draws(y0, y1, s.astype(np.int64), np.column_stack([x1, x3, x5]), margins)


def _draw_m3(spec, n, rng):
    x1 = rng.beta(3.0, 4.0, n)
    x2 = rng.uniform(-2.0, 2.0, n)
    x3 = x1 * x2
    x4 = rng.integers(1, 6, n)
    e0 = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    x2s = _ceil_level(1.25 * (x2 + 2.0), 5) + 1
    x3s = (x3 > 0).astype(np.int64) + 1
    g0 = M3_BETA[0] * x1 + M3_BETA[1] * x2 + M3_BETA[2] * x3 + M3_BETA[3] * x4
    g1 = M3_BETA[0] * np.log(x1) * x4
    y0 = spec.mu0 + g0 + x3s * e0
    y1 = spec.mu1 + g1 + 2.0 * x2s * e1
    if spec.setting == 1:
        margins = np.column_stack([x2s - 1, x4 - 1])
    elif spec.setting == 2:
        margins = np.column_stack([(x1 > 0.5).astype(np.int64), x2s - 1, x4 - 1])
    else:
        margins = np.column_stack([_ceil_level(4.0 * x1, 4), x2s - 1, x4 - 1])
    code = encode_levels(margins, spec.margin_sizes)
    return Draws(y0, y1, code, np.column_stack([x1, x3]), margins)


def site_of(x5, sites):
    """0-based site from equal-probability normal quantile bins."""
    return np.minimum((special.ndtr(x5) * sites).astype(np.int64), sites - 1)


def _draw_extreme(spec, n, rng):
    x1 = rng.beta(2.0, 2.0, n)
    x2 = np.where(rng.random(n) < 0.7, 1, 2)
    x3 = rng.uniform(-2.0, 3.0, n)
    x4 = rng.integers(1, 6, n)
    x5 = rng.standard_normal(n)
    e0 = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    x = np.column_stack([x1, x2, x3, x4, x5])
    y0 = spec.mu0 + x @ EXTREME_BETA0 + e0
    y1 = spec.mu1 + x @ EXTREME_BETA1 + 2.0 * e1
    margins = np.column_stack([x2 - 1, x4 - 1, site_of(x5, spec.sites)])
    code = encode_levels(margins, spec.margin_sizes)
    return Draws(y0, y1, code, np.column_stack([x1, x3]), margins)


_DRAW = {Model.M1: _draw_m1, Model.M2: _draw_m2, Model.M3: _draw_m3,
         Model.EXTREME: _draw_extreme}


def draw_units(spec: ModelSpec, n: int, rng: np.random.Generator) -> Draws:
    return _DRAW[spec.model](spec, n, rng)


def draw_unit(spec: ModelSpec, rng: np.random.Generator) -> PotentialDraw:
    d = draw_units(spec, 1, rng)
    return PotentialDraw(float(d.y0[0]), float(d.y1[0]), int(d.stratum[0]),
                         d.x_adjust[0].copy(), tuple(int(v) for v in d.margins[0]))


def pi_for_stratum(spec: ModelSpec, s: int) -> float:
    """Target treated probability of stratum code ``s``.

    The grid regime spaces probabilities evenly over the strata in code order;
    the odd-even regime assigns 0.2 to odd codes and 0.8 to even ones.
    """
    regime = spec.pi
    if regime.kind is PiKind.EQUAL:
        return regime.value
    if regime.kind is PiKind.ODD_EVEN:
        return 0.2 if s % 2 == 1 else 0.8
    k = spec.n_strata
    idx = s - spec.stratum_base
    if k == 1:
        return regime.lo
    return regime.lo + (regime.hi - regime.lo) * idx / (k - 1)


def design_targets(spec: ModelSpec) -> DesignTargets:
    """Targets keyed by stratum code over the full stratum space."""
    return DesignTargets({int(s): pi_for_stratum(spec, int(s)) for s in spec.stratum_codes})


# true effects -----------------------------------------------------------------

def _m2_odd_moments(setting):
    """E[I{S odd}] and E[X_j I{S odd}] for j = 1..5 by exact enumeration."""
    b = stats.beta(2, 2)
    b3 = stats.beta(3, 2)  # t * Beta(2,2) density is 0.5 * Beta(3,2) density
    if setting == 1:
        cuts = [0.0, 5.0]
    elif setting == 2:
        cuts = [0.0, M2_X1_QUARTILES[1], 5.0]
    else:
        cuts = [0.0, *M2_X1_QUARTILES, 5.0]
    levels = len(cuts) - 1
    p_odd = 0.0
    ex = np.zeros(5)
    for k in range(levels):
        lo, hi = cuts[k] / 5.0, cuts[k + 1] / 5.0
        pk = b.cdf(hi) - b.cdf(lo)
        e1k = 5.0 * 0.5 * (b3.cdf(hi) - b3.cdf(lo))  # E[X1 I{bin k}]
        for x2 in range(1, 6):
            for x4 in range(1, 6):
                if setting == 1:
                    s = x2 + 5 * (x4 - 1)
                else:
                    s = (k + 1) + levels * (x2 - 1) + levels * 5 * (x4 - 1)
                if s % 2 == 0:
                    continue
                w = 1.0 / 25.0
                p_odd += w * pk
                ex[0] += w * e1k
                ex[1] += w * pk * x2
                ex[3] += w * pk * x4
    ex[2] = 0.5 * p_odd  # E[X3] = 0.5, independent of S
    ex[4] = 0.0
    return p_odd, ex


def analytic_tau(spec: ModelSpec) -> float:
    """Exact average treatment effect of the model."""
    base = spec.mu1 - spec.mu0
    if spec.model is Model.M1:
        return base
    if spec.model is Model.M2:
        _, ex_odd = _m2_odd_moments(spec.setting)
        return base + float(np.dot(M2_BETA1 - M2_BETA0, ex_odd))
    if spec.model is Model.M3:
        e_log_x1 = special.digamma(3.0) - special.digamma(7.0)
        e_g1 = M3_BETA[0] * e_log_x1 * 3.0
        e_g0 = M3_BETA[0] * 3.0 / 7.0 + 0.0 + 0.0 + M3_BETA[3] * 3.0
        return base + float(e_g1 - e_g0)
    ex = np.array([0.5, 1.3, 0.5, 3.0, 0.0])
    return base + float(np.dot(EXTREME_BETA1 - EXTREME_BETA0, ex))


def true_tau(spec: ModelSpec, mc_draws: int = 1_000_000, seed: int = 0,
             chunk: int = 1_000_000) -> tuple[float, float]:
    """Monte Carlo mean of Y(1) - Y(0) and its standard error."""
    if spec.model is Model.M1:
        return spec.mu1 - spec.mu0, 0.0
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < mc_draws:
        m = min(chunk, mc_draws - done)
        d = draw_units(spec, m, rng)
        diff = d.y1 - d.y0
        total += math.fsum(diff)
        total_sq += math.fsum(diff * diff)
        done += m
    mean = total / done
    var = (total_sq - done * mean * mean) / (done - 1)
    return mean, math.sqrt(var / done)
