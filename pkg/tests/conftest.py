import numpy as np
import pytest
from hypothesis import settings, HealthCheck

from driftlab.grid import GridSpec

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def spec16():
    return GridSpec(nx=16, ny=16, h=8.0, delta=6.0, k_steps=8)


@pytest.fixture
def spec32():
    return GridSpec(nx=32, ny=32, h=8.0, delta=6.0, k_steps=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
