import numpy as np
import pytest

from dmft_lab.model import ModelParams
from dmft_lab.mp_oracle import OracleParams, mp_quadrature
from dmft_lab.priors import GaussianFixed, PriorSpec


@pytest.fixture(scope="session")
def gaussian_default_params():
    return ModelParams(n=800, d=400, sigma2=1.0, beta=1.0, gamma_step=0.01, horizon=2.0)


@pytest.fixture(scope="session")
def gaussian_default_prior():
    return PriorSpec(GaussianFixed(1.0))


@pytest.fixture(scope="session")
def default_oracle():
    return OracleParams(lam=1.0, sigma2=1.0, delta=2.0, tau_star2=1.0)


@pytest.fixture(scope="session")
def default_law():
    return mp_quadrature(2.0, 400)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
