import numpy as np
import pytest

from echub.splits import split_cv
from echub.synthetic import GeneratorSpec, generate
from echub.training import TrainConfig

TINY_EXTRACTOR = dict(temporal_filters=2, depth_multiplier=1, separable_filters=2,
                      temporal_kernel_len=3, separable_kernel_len=3, pool1=2, pool2=2)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the desk-scale experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def tiny_spec():
    """6 subjects x 2 sessions x 4 trials of 3 channels by 16 samples"""
    return GeneratorSpec(n_subjects=6, n_sessions=2, trials_per_class=2, channels=3,
                         fs=50.0, trial_seconds=0.32, seed=7)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=3, batch_size=8, n_models=2, n_folds=3, extractor=TINY_EXTRACTOR)


@pytest.fixture
def tiny_plan(tiny_corpus):
    return split_cv(tiny_corpus.subject_ids, 3, 0, np.random.default_rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_extractor():
    return dict(TINY_EXTRACTOR)
