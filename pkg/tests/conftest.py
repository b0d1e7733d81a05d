import numpy as np
import pytest

from amel import autodiff


@pytest.fixture
def f64():
    """Run a test under float64 tensor defaults (oracle precision)."""
    autodiff.set_default_dtype(np.float64)
    yield
    autodiff.set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
