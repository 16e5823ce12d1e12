import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ocmerge", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ocmerge")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def low_rank(rng, m, n, r):
    """Random m x n matrix of rank at most r."""
    if r == 0:
        return np.zeros((m, n))
    return rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
