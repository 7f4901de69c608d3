import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aqmeta import tasks

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def synthetic_split():
    """Default synthetic task distribution: 20 train / 10 test classes."""
    return tasks.synthetic_split(tasks.SyntheticSpec(), 20, 0)


@pytest.fixture(scope="session")
def small_split():
    spec = tasks.SyntheticSpec(n_classes=8, feature_dim=4, per_class=12)
    return tasks.synthetic_split(spec, 5, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
