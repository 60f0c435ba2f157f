import os

# Single-threaded BLAS so training losses repeat bit for bit across runs.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest

from mimicparts.numerics import set_check_finite


@pytest.fixture(autouse=True, scope="session")
def _eager_finite_checks():
    set_check_finite(True)
    yield
    set_check_finite(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
