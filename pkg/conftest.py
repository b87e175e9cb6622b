import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from spin_model import MODEL, HamiltonianSpec
from models.ansatz import ANSATZ, VariationalState, num_params


def random_rbm(n_sites, n_hidden, std=0.1, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, std, size=num_params(ANSATZ.rbm, n_sites, n_hidden))
    return VariationalState(ANSATZ.rbm, n_sites, theta, n_hidden)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tfim4():
    return HamiltonianSpec(MODEL.tfim, 4, J=1.0, g=1.0)


@pytest.fixture
def tilted4():
    return HamiltonianSpec(MODEL.tilted_ising, 4, J=0.1, g=1.0)


@pytest.fixture
def rbm4():
    return random_rbm(4, 8, std=0.3, seed=7)
