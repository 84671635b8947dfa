import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def warm_kernels():
    """Trigger jit compilation outside any timed section."""
    from iris3d import kernels

    zbuf = np.full((4, 4), np.inf)
    idxbuf = np.full((4, 4), -1, dtype=np.int64)
    uv = np.array([[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]])
    z = np.ones((1, 3))
    kernels.fill_triangles(uv, z, np.zeros(1, dtype=np.int64), zbuf, idxbuf)
    kernels.sinkhorn_normalize(np.ones((3, 3)), 1e-6, 5)
    kernels.gmm_cross_term(np.zeros((2, 3)), np.ones(2), np.zeros(2 * 3).reshape(2, 3), np.ones(2), 1.0)
    return True
