import numpy as np
import pytest

from pipeshift import scoring


@pytest.fixture(scope="session")
def phantoms_small():
    return scoring.gen_phantoms(8, seed=4242)


@pytest.fixture(scope="session")
def scorer():
    return scoring.SyntheticScorer(seed=11)


@pytest.fixture(scope="session")
def protos(scorer):
    return scorer.prototypes()


@pytest.fixture()
def rng():
    return np.random.default_rng(20250810)
