import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from latticeheat import potentials
from latticeheat.geometry import periodic_equidistributed
from latticeheat.lattice import LatticeBox
from latticeheat.schrodinger import assemble_and_decompose

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def dec_zero():
    """1-D, V = 0, h = 0.2 on [-4, 4]."""
    return assemble_and_decompose(LatticeBox.centered(1, 0.2, 4.0), potentials.zero())


@pytest.fixture(scope="session")
def dec_sine():
    return assemble_and_decompose(LatticeBox.centered(1, 0.2, 4.0), potentials.sine())


@pytest.fixture(scope="session")
def equi_mask(dec_zero):
    return periodic_equidistributed(dec_zero.box, 2.0, 0.5)
