import numpy as np
import pytest
from hypothesis import settings

from strata_infer.trial_data import Dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_trial(rng, n_strata=3, min_cell=2, max_cell=6, p=2, labels=None):
    """A dataset with every stratum-arm cell of size in [min_cell, max_cell]."""
    strata, arms = [], []
    for s in range(n_strata):
        for a in (0, 1):
            m = int(rng.integers(min_cell, max_cell + 1))
            strata += [s] * m
            arms += [a] * m
    n = len(strata)
    perm = rng.permutation(n)
    strata = np.asarray(strata)[perm]
    arms = np.asarray(arms)[perm]
    x = rng.normal(size=(n, p))
    y = 1.0 + x @ rng.normal(size=p) + 0.7 * arms + rng.normal(size=n) + strata
    if labels is not None:
        strata = [labels[s] for s in strata]
    return Dataset.from_arrays(strata, arms, y, x)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
