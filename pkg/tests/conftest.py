import numpy as np
import pytest

from sphreg.sphere import fibonacci_sphere


@pytest.fixture(scope="session")
def small_sphere():
    # ~25 mm spacing; cheap all-pairs oracles stay cheap
    return fibonacci_sphere(200, radius=100.0)


@pytest.fixture(scope="session")
def dense_sphere():
    # radius 10 mm so the standard mm-scale radii (2-16 mm) are meaningful
    return fibonacci_sphere(200, radius=10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
