import numpy as np
import pytest

from nodessl import diffcore


@pytest.fixture(autouse=True)
def _f64():
    diffcore.set_precision("f64")
    yield
    diffcore.set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(fn, arr, eps=1e-6):
    """d fn() / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = fn()
        arr[idx] = old - eps
        down = fn()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad
