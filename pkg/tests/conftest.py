import numpy as np
import pytest

from crtyolo import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["python", "compiled"])
def backend(request):
    """Run a test once per kernel backend, restoring the default afterwards."""
    if request.param == "compiled" and kernels.compiled is None:
        pytest.skip("compiled kernels not built")
    previous = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)
