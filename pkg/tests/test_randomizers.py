import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from strata_infer.errors import DataValidationError, NonIntegralBlock
from strata_infer.randomizers import (AssignmentState, PermutedBlockRandomizer,
                                      RandomizerConfig, Scheme, biased_coin_probability,
                                      hu_hu_imbalance, minimization_assign,
                                      minimization_imbalance, minimize_sequence,
                                      permuted_block_randomize, randomize,
                                      simple_randomize, stratified_block_randomize)
from strata_infer.trial_data import DesignTargets


@given(sizes=st.lists(st.integers(1, 30), min_size=1, max_size=8),
       pis=st.lists(st.sampled_from([0.2, 0.25, 0.5, 0.6, 0.8]), min_size=8, max_size=8),
       seed=st.integers(0, 2**32 - 1))
def test_block_randomization_exact_counts(sizes, pis, seed):
    strata = np.repeat(np.arange(len(sizes)), sizes)
    np.random.default_rng(seed).shuffle(strata)
    targets = DesignTargets({s: pis[s] for s in range(len(sizes))})
    arm = stratified_block_randomize(strata, targets, seed)
    for s, size in enumerate(sizes):
        assert arm[strata == s].sum() == int(np.floor(pis[s] * size + 1e-9))


def test_block_randomization_subset_is_uniform():
    targets = DesignTargets({0: 0.5})
    counts = Counter(tuple(stratified_block_randomize([0] * 4, targets, seed))
                     for seed in range(6000))
    assert len(counts) == 6  # C(4, 2)
    assert all(abs(c / 6000 - 1 / 6) < 0.02 for c in counts.values())


def test_block_randomization_handles_float_products():
    # 0.7 * 10 evaluates to 7.000000000000001 and 0.3 * 10 to 3.0000000000000004
    targets = DesignTargets({0: 0.7, 1: 0.3})
    arm = stratified_block_randomize([0] * 10 + [1] * 10, targets, 1)
    assert arm[:10].sum() == 7 and arm[10:].sum() == 3


def test_simple_randomization_frequency_and_determinism():
    targets = DesignTargets({"a": 0.2, "b": 0.8})
    strata = ["a", "b"] * 20000
    arm = simple_randomize(strata, targets, 11)
    assert abs(arm[0::2].mean() - 0.2) < 0.01
    assert abs(arm[1::2].mean() - 0.8) < 0.01
    np.testing.assert_array_equal(arm, simple_randomize(strata, targets, 11))


def test_permuted_block_rejects_non_integral_block():
    pbr = PermutedBlockRandomizer(DesignTargets({"a": 0.3}), 4, 0)
    with pytest.raises(NonIntegralBlock):
        pbr.assign("a")


@given(seed=st.integers(0, 10**6), block=st.sampled_from([2, 4, 6, 8]))
def test_permuted_block_prefix_imbalance_bounded(seed, block):
    rng = np.random.default_rng(seed)
    strata = rng.integers(0, 3, 120).tolist()
    arm = permuted_block_randomize(strata, DesignTargets.constant(0.5, [0, 1, 2]), block, seed)
    for s in range(3):
        a = arm[np.asarray(strata) == s]
        prefix = np.cumsum(2 * a - 1)
        assert np.abs(prefix).max(initial=0) <= block // 2
        # complete blocks are exactly balanced
        full = len(a) - len(a) % block
        assert a[:full].sum() == full // 2


def test_biased_coin_sign_rule():
    assert biased_coin_probability(0, 0.75) == 0.5
    assert biased_coin_probability(-2, 0.75) == 0.75
    assert biased_coin_probability(3, 0.75) == 0.25


def test_minimization_imbalance_uses_history_only():
    config = RandomizerConfig(Scheme.MINIMIZATION)
    state = AssignmentState()
    state.record((0, 1), None, 1)
    state.record((0, 0), None, 1)
    state.record((1, 1), None, 0)
    # margin 0 level 0: +2; margin 1 level 1: +1 - 1 = 0
    assert minimization_imbalance(state, (0, 1), config) == 2
    assert state.assigned == 3
    weighted = RandomizerConfig(Scheme.MINIMIZATION, margin_weights=(0.5, 2.0))
    assert minimization_imbalance(state, (1, 0), weighted) == pytest.approx(-0.5 + 2.0)


def test_minimization_deterministic_with_lambda_one():
    config = RandomizerConfig(Scheme.MINIMIZATION, lam=1.0, seed=5)
    margins = np.zeros((101, 1), dtype=int)
    arm = minimize_sequence(margins, config)
    assert abs(np.cumsum(2 * arm - 1)).max() <= 1


def test_minimization_sequence_matches_stepwise_assignment():
    rng = np.random.default_rng(3)
    margins = rng.integers(0, 3, size=(200, 2))
    config = RandomizerConfig(Scheme.MINIMIZATION, seed=9)
    fast = minimize_sequence(margins, config)
    state = AssignmentState()
    gen = np.random.Generator(np.random.Philox(9))
    slow = [minimization_assign(state, tuple(row), config, gen) for row in margins.tolist()]
    np.testing.assert_array_equal(fast, slow)


def test_minimization_balances_margins_better_than_simple():
    rng = np.random.default_rng(1)
    margins = rng.integers(0, 5, size=(500, 2))
    arm = minimize_sequence(margins, RandomizerConfig(Scheme.MINIMIZATION, seed=2))
    for j in range(2):
        for level in range(5):
            a = arm[margins[:, j] == level]
            assert abs(2 * a.sum() - len(a)) <= 6


def test_minimization_requires_equal_allocation():
    config = RandomizerConfig(Scheme.MINIMIZATION, targets=DesignTargets({0: 0.3}))
    with pytest.raises(DataValidationError):
        randomize(config, [0, 0, 0], np.zeros((3, 1), dtype=int))


def test_hu_hu_needs_some_weight_and_combines_terms():
    with pytest.raises(DataValidationError):
        RandomizerConfig(Scheme.HU_HU, margin_weights=(0.0,), w_overall=0.0, w_stratum=0.0)
    config = RandomizerConfig(Scheme.HU_HU, margin_weights=(1.0,), w_overall=0.5,
                              w_stratum=2.0)
    state = AssignmentState()
    state.record((0,), "s", 1)
    state.record((1,), "t", 1)
    assert hu_hu_imbalance(state, (0,), "s", config) == pytest.approx(0.5 * 2 + 1 + 2 * 1)


def test_hu_hu_stratum_term_balances_strata():
    rng = np.random.default_rng(4)
    margins = rng.integers(0, 2, size=(400, 2))
    strata = (margins[:, 0] * 2 + margins[:, 1]).tolist()
    config = RandomizerConfig(Scheme.HU_HU, lam=1.0, w_stratum=1.0, margin_weights=(0, 0),
                              seed=3)
    arm = randomize(config, strata, margins)
    for s in range(4):
        a = arm[np.asarray(strata) == s]
        assert abs(2 * a.sum() - len(a)) <= 1


def test_config_validation():
    with pytest.raises(DataValidationError):
        RandomizerConfig(Scheme.MINIMIZATION, lam=0.4)
    with pytest.raises(DataValidationError):
        RandomizerConfig(Scheme.PERMUTED_BLOCK, block_size=3)


@pytest.mark.parametrize("scheme", [Scheme.SIMPLE, Scheme.BLOCK, Scheme.PERMUTED_BLOCK])
def test_dispatch_is_seed_deterministic(scheme):
    strata = [s for s, _ in itertools.product("abc", range(10))]
    targets = DesignTargets.constant(0.5, "abc")
    config = RandomizerConfig(scheme, targets=targets, seed=42)
    np.testing.assert_array_equal(randomize(config, strata), randomize(config, strata))


def test_simple_randomization_extreme_probability():
    arm = simple_randomize([0] * 10000, DesignTargets({0: 0.999}), 3)
    assert 0.99 <= arm.mean() <= 1.0


def test_simple_randomization_hoeffding():
    arm = simple_randomize([0] * 2000, DesignTargets({0: 0.5}), 8)
    assert abs(arm.mean() - 0.5) <= 0.04


@pytest.mark.parametrize("n, expected", [(5, 2), (1, 0)])
def test_block_floor_rule(n, expected):
    for seed in range(20):
        assert stratified_block_randomize([0] * n, DesignTargets({0: 0.5}), seed).sum() == expected


def test_permuted_blocks_exhaust_and_quarter_allocation():
    arm = permuted_block_randomize([0] * 12, DesignTargets({0: 0.5}), 4, 6)
    assert all(2 * arm[:k].sum() == k for k in (4, 8, 12))
    quarter = permuted_block_randomize([0] * 16, DesignTargets({0: 0.25}), 4, 6)
    assert quarter.reshape(4, 4).sum(axis=1).tolist() == [1, 1, 1, 1]


def test_minimization_first_unit_and_sign():
    config = RandomizerConfig(Scheme.MINIMIZATION)
    state = AssignmentState()
    assert biased_coin_probability(minimization_imbalance(state, (0, 0), config), 0.75) == 0.5
    for arm in (1, 1, 1, 0):
        state.record((0, 0), None, arm)
    imb = minimization_imbalance(state, (0, 0), config)
    assert imb > 0 and biased_coin_probability(imb, 0.75) == 0.25


def test_hu_hu_special_cases():
    overall = RandomizerConfig(Scheme.HU_HU, margin_weights=(0.0,), w_overall=1.0)
    state = AssignmentState()
    state.record((0,), "s", 1)
    state.record((1,), "t", 1)
    state.record((1,), "t", 0)
    assert biased_coin_probability(hu_hu_imbalance(state, (5,), "u", overall), 0.75) == 0.25
    stratum_only = RandomizerConfig(Scheme.HU_HU, margin_weights=(0.0,), w_stratum=1.0)
    assert hu_hu_imbalance(state, (0,), "fresh", stratum_only) == 0
    # margin level 0 has +1, stratum "t" has 0, overall +1: offset by w_overall = -1 is
    # not allowed, so cancel with a stratum at -1 instead
    state.record((2,), "v", 0)
    equal = RandomizerConfig(Scheme.HU_HU, margin_weights=(1.0,), w_stratum=1.0)
    assert hu_hu_imbalance(state, (0,), "v", equal) == 0
