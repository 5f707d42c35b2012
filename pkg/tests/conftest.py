import numpy as np
import pytest

from efft.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
