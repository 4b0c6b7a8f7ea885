import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "voltra", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("voltra")

HESTON = dict(lam=1.2, theta=0.04, zeta=0.3, v0=0.04)


@pytest.fixture
def heston_params():
    return dict(HESTON)


def zero_fn(s):
    return np.zeros_like(np.asarray(s, dtype=float))
