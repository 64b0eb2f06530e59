import pytest

from rtwave.equilibrium import PhysicalParams, PressureLaw, build_equilibrium
from rtwave.spectral import Grid

# lower-layer K giving density jumps +1, 0, -1 above K_plus = 1, alpha = 2
K_MINUS = {"unstable": 9.0, "neutral": 1.0, "stable": 0.36}


def make_profile(kind, **params):
    p = PhysicalParams(**params)
    law_minus = PressureLaw.polytropic(K_MINUS[kind], 2.0)
    return build_equilibrium(PressureLaw.polytropic(1.0, 2.0), law_minus, p, 64), p


@pytest.fixture(scope="session")
def small_grid():
    return Grid(1.0, 1.0, 8, 12, 12, 1.0, 1.0)


@pytest.fixture(scope="session")
def grid16():
    return Grid(1.0, 1.0, 8, 16, 16, 1.0, 1.0)


@pytest.fixture(scope="session")
def unstable():
    return make_profile("unstable")


@pytest.fixture(scope="session")
def stable():
    return make_profile("stable")
