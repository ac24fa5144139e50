import numpy as np
import pytest


def random_rotation(rng, c):
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    return q * np.sign(np.diag(r))


def anisotropic_gaussian(rng, n, c, spread=3.0, mean_scale=2.0):
    """N x C Gaussian sample with a random eigenbasis and log-uniform spectrum."""
    lam = np.exp(rng.uniform(-spread, spread, c))
    u = random_rotation(rng, c)
    mean = rng.normal(0.0, mean_scale, c)
    x = mean + (rng.standard_normal((n, c)) * np.sqrt(lam)) @ u.T
    return x, (u * lam) @ u.T, mean


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
