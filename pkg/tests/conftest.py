import os

# single-core, deterministic numerics; must happen before numpy is imported
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
os.environ.setdefault("NUMEXPR_NUM_THREADS", "1")
os.environ.setdefault("NUMBA_NUM_THREADS", "1")

import numpy as np
import pytest

from lcmkit import tensor as T


@pytest.fixture
def f64():
    """Run a test in 64-bit mode (gradient checks, oracle comparisons)."""
    prev = T.default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
