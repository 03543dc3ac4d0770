import numpy as np
import pytest

from collar_geometry import make_collar
from mode_sections import QuadratureSpec


@pytest.fixture
def collar_01():
    return make_collar(0.1, 64)


@pytest.fixture
def collar_005():
    return make_collar(0.05, 64)


@pytest.fixture
def quadrature():
    return QuadratureSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
