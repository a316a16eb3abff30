"""Synthetic data sampled from a GP with the configured kernel.

Exact joint sampling up to a size cap; above it, points are ordered
along their first principal axis and sampled chunk by chunk, each chunk
conditioned on the previous one (a documented approximation that keeps
local structure).  Observation noise is added after the latent draw.
"""

from __future__ import annotations

import numpy as np

from .blockmat import cholesky_jittered
from .data import Dataset
from .kernel import Hyperparams, gram
from .partition import _principal_axis

__all__ = ["sample_gp_dataset", "EXACT_SAMPLING_CAP"]

EXACT_SAMPLING_CAP = 4000
_CHUNK = 2000


def _latent_gram(X1, X2, h: Hyperparams) -> np.ndarray:
    h0 = Hyperparams(h.signal_var, 0.0, h.lengthscales, h.prior_mean)
    return gram(X1, X2, h0)


def _sample_latent(X: np.ndarray, h: Hyperparams, rng) -> np.ndarray:
    n = X.shape[0]
    if n <= EXACT_SAMPLING_CAP:
        k = _latent_gram(X, X, h)
        l, _ = cholesky_jittered(k + 1e-10 * h.signal_var * np.eye(n))
        return h.prior_mean + l @ rng.standard_normal(n)
    axis = _principal_axis(X)
    order = np.argsort(X @ axis, kind="stable")
    f = np.empty(n)
    prev_idx = None
    for start in range(0, n, _CHUNK):
        idx = order[start : start + _CHUNK]
        k_cc = _latent_gram(X[idx], X[idx], h) + 1e-10 * h.signal_var * np.eye(idx.size)
        if prev_idx is None:
            l, _ = cholesky_jittered(k_cc)
            f[idx] = h.prior_mean + l @ rng.standard_normal(idx.size)
        else:
            k_cp = _latent_gram(X[idx], X[prev_idx], h)
            k_pp = _latent_gram(X[prev_idx], X[prev_idx], h)
            l_pp, _ = cholesky_jittered(k_pp + 1e-10 * h.signal_var * np.eye(prev_idx.size))
            from scipy.linalg import cho_solve

            gain = cho_solve((l_pp, True), k_cp.T).T
            mean = h.prior_mean + gain @ (f[prev_idx] - h.prior_mean)
            cov = k_cc - gain @ k_cp.T
            l, _ = cholesky_jittered(0.5 * (cov + cov.T))
            f[idx] = mean + l @ rng.standard_normal(idx.size)
        prev_idx = idx
    return f


def sample_gp_dataset(
    n_train: int,
    n_test: int,
    d: int,
    h: Hyperparams,
    seed: int = 0,
    box: float = 10.0,
):
    """Draw (train, test) datasets from the GP prior; test outputs included.

    Inputs are uniform in [0, box)^d; train and test outputs come from
    one joint latent draw plus independent observation noise.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    X = rng.uniform(0.0, box, size=(n, d))
    f = _sample_latent(X, h, rng)
    y = f + np.sqrt(h.noise_var) * rng.standard_normal(n)
    return Dataset(X[:n_train], y[:n_train]), Dataset(X[n_train:], y[n_train:])
