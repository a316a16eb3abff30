import numpy as np
import pytest

from lmagp.data import Dataset
from lmagp.kernel import Hyperparams


def make_instance(seed=0, n=60, d=2, t=12, noise_var=0.05, lengthscale=1.5, mean=0.2):
    """Random smooth regression instance in the method's operating regime."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-4, 4, size=(n, d))
    y = np.sin(X[:, 0]) + 0.5 * np.cos(X.sum(axis=1)) + 0.1 * rng.standard_normal(n)
    test = rng.uniform(-4, 4, size=(t, d))
    h = Hyperparams(1.0, noise_var, np.full(d, float(lengthscale)), prior_mean=mean)
    return Dataset(X, y), test, h


def max_abs(a, b=None):
    a = np.asarray(a)
    if b is not None:
        a = a - np.asarray(b)
    return float(np.max(np.abs(a))) if a.size else 0.0


def rel_err(a, b):
    """max |a-b| relative to the scale of b."""
    return max_abs(a, b) / (1.0 + max_abs(b))


@pytest.fixture
def small_instance():
    return make_instance()
