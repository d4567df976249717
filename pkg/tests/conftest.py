import numpy as np
import pytest


def random_spd(rng, d, extra=4):
    """Random SPD matrix from a thin Gaussian factor (full rank for n > d)."""
    x = rng.normal(size=(d, d + extra))
    return x @ x.T + 1e-6 * np.eye(d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
