import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_patches(n, h, w, seed=0, dtype=np.float32):
    """Batch of uniform random patches as one (n, h, w, 3) array."""
    gen = np.random.default_rng(seed)
    return gen.random((n, h, w, 3), dtype=np.float64).astype(dtype)
