"""Shared robot fixtures and random-state helpers."""

import numpy as np
import pytest

from freeflyer.models import make_astrobee, make_free_base


def random_state(desc, rng, pos=1.0, angle=0.8, rate=0.6):
    """State with bounded attitude (clear of the pitch singularity)."""
    n_m = desc.n_m
    y = np.concatenate([
        rng.uniform(-pos, pos, 3),
        rng.uniform(-angle, angle, 3) * np.array([1.0, 0.7, 1.0]),
        rng.uniform(-1.2, 1.2, n_m),
    ])
    yd = rng.uniform(-rate, rate, 6 + n_m)
    return np.concatenate([y, yd])


@pytest.fixture(scope="session")
def astrobee():
    return make_astrobee()


@pytest.fixture(scope="session")
def free_base():
    return make_free_base()
