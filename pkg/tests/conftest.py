import numpy as np
import pytest

from specpred import cli


@pytest.fixture(scope="session")
def descriptor():
    return cli.default_descriptor()


@pytest.fixture(scope="session")
def design(descriptor):
    model, cert = cli.design_pipeline(descriptor)
    return model, cert


@pytest.fixture(scope="session")
def model(design):
    return design[0]


@pytest.fixture(scope="session")
def exact_cert(design):
    """Certificate with the exactly-computable part only (no fitted gains)."""
    return design[1]


@pytest.fixture(scope="session")
def fitted_cert(descriptor):
    """Fully certified design: fitted constants from a small seeded ensemble."""
    return cli.certify_pipeline(descriptor, seed=7, n_fit=12, dt=4e-3, T=6.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
