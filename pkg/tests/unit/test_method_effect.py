"""Desk-scale comparison of the baselines and the curriculum ensemble

Takes a long time on a laptop; run with --runslow.
"""

import numpy as np
import pytest

from echub.experiments import run_suite
from echub.synthetic import GeneratorSpec, generate
from echub.training import TrainConfig

SEEDS = range(5)
SIGMA_MIX = 0.5


@pytest.fixture(scope="module")
def desk_corpus():
    spec = GeneratorSpec(n_subjects=12, n_sessions=2, trials_per_class=20, channels=8,
                         fs=100.0, trial_seconds=2.0, sigma_mix=SIGMA_MIX, seed=0)
    return generate(spec, workers=4).aligned("riemann")


def accuracy_per_seed(corpus, **changes):
    scores = []
    for seed in SEEDS:
        cfg = TrainConfig(epochs=40, n_models=3, n_folds=5, seed=seed).replace(**changes)
        scores.append(run_suite("cv", cfg, corpus)["mean_test_accuracy"])
    return np.array(scores)


@pytest.mark.slow
def test_curriculum_ensemble_is_not_worse(desk_corpus):
    single = accuracy_per_seed(desk_corpus, method="single", loss_mode="ce")
    ensemble_ce = accuracy_per_seed(desk_corpus, loss_mode="ce")
    total = accuracy_per_seed(desk_corpus, loss_mode="total")
    print("single %s\nensemble/ce %s\nensemble/total %s" % (single, ensemble_ce, total))

    assert 0.65 <= single.mean() <= 0.85, "sigma_mix=%g is off the desk range" % SIGMA_MIX
    assert ensemble_ce.mean() >= single.mean() - 0.01
    assert total.mean() >= ensemble_ce.mean() - 0.01
    assert np.sum(total > ensemble_ce) > len(SEEDS) / 2
