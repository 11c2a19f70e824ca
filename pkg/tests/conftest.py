import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_spd(rng, n, cond=50.0):
    """Dense SPD matrix with eigenvalues spread over ``[1, cond]``."""
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), n))
    return (V * lam) @ V.T


def lattice_precision(m, kappa2=0.5, nugget=0.0):
    """Dense-free 2-D lattice precision (second-order, SPD)."""
    T = sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1])
    I = sp.identity(m)
    G = sp.kron(T, I) + sp.kron(I, T)
    K = kappa2 * sp.identity(m * m) + G
    return (K @ K + nugget * sp.identity(m * m)).tocsc()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
