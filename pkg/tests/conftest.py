import numpy as np
import pytest

import spikereid.tensor as tt


@pytest.fixture
def f64():
    """Run a test at float64 (gradient checks need the headroom)."""
    old = tt.get_default_dtype()
    tt.set_default_dtype(np.float64)
    yield
    tt.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
