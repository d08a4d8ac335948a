import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from halfplane_ns.core import init_state, make_grid, make_params

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def gauss(c=(0.0, 0.0), w=0.5, base=0.0, amp=1.0):
    return lambda x1, x2: base + amp * np.exp(-((x1 - c[0]) ** 2 + (x2 - c[1]) ** 2) / (2 * w * w))


@pytest.fixture
def small_grid():
    return make_grid(2.0, 2.0, 32, 16)


@pytest.fixture
def bump_state(small_grid):
    """Non-vacuum bump with a smooth wall-compatible velocity."""
    p = make_params(1.0, 0.5, 2.0, 0.5, 1.0)
    e = gauss(w=0.5)
    s, _ = init_state(small_grid, gauss(w=0.5, base=1.0, amp=0.4),
                      lambda x1, x2: (0.3 * x1 * e(x1, x2), 0.2 * x2 * e(x1, x2)), p)
    return s, p


@pytest.fixture
def vacuum_state(small_grid):
    p = make_params(1.0, 0.0, 2.0, 0.0, 0.0)
    s, prof = init_state(small_grid, gauss(w=0.4), lambda x1, x2: (0 * x1, 0 * x1), p,
                         normalize_mass=True)
    return s, p, prof
