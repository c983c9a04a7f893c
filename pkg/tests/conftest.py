import warnings

import numpy as np
import pytest

from kpzlab.gaussian_env import GridSpec, TruncationWarning


def quiet_grid(dx, dt, half_width, n_steps):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        return GridSpec(dx, dt, half_width, n_steps)


@pytest.fixture
def small_grid():
    # t = 0.2 on a lattice wide enough for ~1e-9 mass loss
    return GridSpec.for_time(0.1, 0.005, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
