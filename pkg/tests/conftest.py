import numpy as np
import pytest


@pytest.fixture
def rng():
    """Fresh seeded generator per test."""
    return np.random.Generator(np.random.PCG64(1234))
