import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from privflock import _kernels


@pytest.fixture(params=_kernels.available_backends())
def kernel_backend(request):
    """Run the test once per importable kernel backend."""
    previous = _kernels.active_backend()
    _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
