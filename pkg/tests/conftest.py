import numpy as np
import pytest

from dyss.kernels import backend

BACKENDS = [b for b in backend.BACKENDS if b != "numba" or backend.numba_available()]


@pytest.fixture(params=BACKENDS)
def each_backend(request):
    """Run the test once per available kernel backend."""
    with backend.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(0)
