import numpy as np
import pytest

from conetomo.geometry import MetricSpec
from conetomo.field import Grid


@pytest.fixture(scope="session")
def cone_spec():
    return MetricSpec(x0=0.3, link="torus")


@pytest.fixture(scope="session")
def pert_spec():
    return MetricSpec(x0=0.3, link="torus", pert_amplitude=0.1, pert_mode=(1, 1))


@pytest.fixture(scope="session")
def sphere_spec():
    return MetricSpec(x0=0.3, link="sphere")


@pytest.fixture(scope="session")
def small_grid(cone_spec):
    return Grid(cone_spec, 12, 8, 8)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)
