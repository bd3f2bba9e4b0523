import json
import pathlib

import numpy as np
import pytest
from scipy import stats

from strata_infer.dgp import (M2_X1_QUARTILES, Model, ModelSpec, PiRegime, analytic_tau,
                              design_targets, draw_unit, draw_units, pi_for_stratum,
                              true_tau)

FIXTURES = json.loads((pathlib.Path(__file__).parent / "fixtures" / "true_tau.json").read_text())


def _draws(spec, n=100_000, seed=0):
    return draw_units(spec, n, np.random.default_rng(seed))


def test_m1_margin_levels_are_uniform():
    d = _draws(ModelSpec(Model.M1, 1))
    counts = np.bincount(d.margins[:, 1], minlength=5)
    assert stats.chisquare(counts).pvalue > 0.001


def test_m1_first_covariate_mean():
    d = _draws(ModelSpec(Model.M1, 1))
    assert abs(d.x_adjust[:, 0].mean() - 0.5) < 0.005


@pytest.mark.parametrize("model", [Model.M1, Model.M2, Model.M3])
@pytest.mark.parametrize("setting, k", [(1, 25), (2, 50), (3, 100)])
def test_stratum_space_is_filled(model, setting, k):
    spec = ModelSpec(model, setting)
    assert spec.n_strata == k
    d = _draws(spec, 200_000)
    assert np.array_equal(np.unique(d.stratum), spec.stratum_codes)


def test_m1_setting1_observes_all_strata_at_n500():
    spec = ModelSpec(Model.M1, 1)
    seen = [len(np.unique(_draws(spec, 500, seed).stratum)) for seed in range(50)]
    assert max(seen) == 25 and np.mean(seen) > 24.5


@pytest.mark.parametrize("sites", [1, 3, 7, 10])
def test_extreme_sites_equiprobable(sites):
    d = _draws(ModelSpec(Model.EXTREME, sites=sites))
    freq = np.bincount(d.margins[:, 2], minlength=sites) / len(d)
    assert np.all(np.abs(freq - 1 / sites) < 0.01)
    assert ModelSpec(Model.EXTREME, sites=sites).n_strata == 10 * sites


def test_m2_quartiles_invert_the_beta_cdf():
    cdf = stats.beta(2, 2).cdf(np.asarray(M2_X1_QUARTILES) / 5)
    np.testing.assert_allclose(cdf, [0.25, 0.5, 0.75], atol=1e-10)


def test_draws_are_deterministic_in_the_seed():
    spec = ModelSpec(Model.M3, 2)
    a, b = _draws(spec, 1000, 4), _draws(spec, 1000, 4)
    np.testing.assert_array_equal(a.stratum, b.stratum)
    np.testing.assert_array_equal(a.y1, b.y1)
    unit = draw_unit(spec, np.random.default_rng(1))
    assert np.isfinite([unit.y0, unit.y1]).all() and len(unit.margins) == 3


def test_pi_regimes():
    odd = ModelSpec(Model.M2, 1, pi=PiRegime.parse("odd-even"))
    assert pi_for_stratum(odd, 3) == 0.2 and pi_for_stratum(odd, 4) == 0.8
    equal = ModelSpec(Model.M1, 1)
    assert all(pi_for_stratum(equal, s) == 0.5 for s in range(25))
    grid = ModelSpec(Model.M1, 1, pi=PiRegime.parse("grid"))
    assert pi_for_stratum(grid, 0) == pytest.approx(0.2)
    assert pi_for_stratum(grid, 24) == pytest.approx(0.8)
    assert set(design_targets(grid).pi1) == set(range(25))


def test_pi_regime_text_roundtrip():
    for text in ("0.5", "grid:0.2,0.8", "odd-even"):
        assert PiRegime.parse(str(PiRegime.parse(text))) == PiRegime.parse(text)


def test_model_spec_config_roundtrip():
    spec = ModelSpec(Model.M2, 2, pi=PiRegime.parse("odd-even"), mu1=1.5)
    assert ModelSpec.from_config(spec.to_config()) == spec


def test_m1_effect_is_intercept_difference():
    spec = ModelSpec(Model.M1, 1, mu0=1.0, mu1=3.0)
    assert analytic_tau(spec) == 2.0
    assert true_tau(spec)[0] == 2.0
    d = _draws(spec, 200_000)
    diff = d.y1 - d.y0
    assert abs(diff.mean() - 2.0) < 4 * diff.std() / np.sqrt(len(diff))


@pytest.mark.parametrize("key, spec", [
    ("m2-s1", ModelSpec(Model.M2, 1)),
    ("m2-s2", ModelSpec(Model.M2, 2)),
    ("m2-s3", ModelSpec(Model.M2, 3)),
    ("m3-s1", ModelSpec(Model.M3, 1)),
    ("extreme-s1", ModelSpec(Model.EXTREME, sites=1)),
])
def test_analytic_effect_agrees_with_frozen_monte_carlo(key, spec):
    frozen = FIXTURES[key]
    assert frozen["se"] < 0.01
    assert abs(analytic_tau(spec) - frozen["tau"]) < 4 * frozen["se"]
