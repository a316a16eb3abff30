"""Exact full-rank GP regression and the direct block-independent predictor.

Both are O(n^3) dense-solve reference methods: production baselines for
the benchmark CLI and oracles for the banded-residual predictor tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockmat import (
    NumericalError,
    NotPositiveDefiniteError,
    ResidualOps,
    chol_solve,
    cholesky_jittered,
    half_solve,
)
from .data import Dataset
from .kernel import Hyperparams, PointSet, gram, prior_mean
from .partition import BlockPartition, SupportSet

__all__ = ["Prediction", "IllConditionedDataError", "fgp_predict", "pic_predict_direct"]

_VAR_FLOOR = -1e-8


class IllConditionedDataError(NumericalError):
    pass


@dataclass
class Prediction:
    """Posterior mean, per-point variance, and optionally the full covariance."""

    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        var = np.asarray(self.variance, dtype=np.float64).ravel()
        if var.shape != self.mean.shape:
            raise ValueError("variance length does not match mean length")
        if var.size and float(var.min()) < _VAR_FLOOR:
            raise NumericalError(f"predictive variance {var.min():.3e} below numerical floor")
        self.variance = np.maximum(var, 0.0)
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=np.float64)
            self.covariance = 0.5 * (cov + cov.T)

    def __len__(self) -> int:
        return self.mean.size


def _test_points(train: Dataset, test) -> PointSet:
    if isinstance(test, PointSet):
        return test
    X = test.X if isinstance(test, Dataset) else np.asarray(test, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    # Test ids start past the training ids so no noise delta fires
    # between a test point and a coincident training point.
    return PointSet(X, train.n + np.arange(X.shape[0], dtype=np.int64))


def fgp_predict(train: Dataset, test, h: Hyperparams, want_cov: bool = False) -> Prediction:
    """Exact GP posterior via Cholesky solves.  O(n^3) time, O(n^2) memory."""
    if train.n < 1:
        raise ValueError("training set is empty")
    if train.y is None:
        raise ValueError("training set has no outputs")
    tp = _test_points(train, test)
    if len(tp) == 0:
        return Prediction(np.zeros(0), np.zeros(0), np.zeros((0, 0)) if want_cov else None)
    dp = train.points()
    sigma_dd = gram(dp, dp, h)
    try:
        l_dd, _ = cholesky_jittered(sigma_dd)
    except NotPositiveDefiniteError as exc:
        raise IllConditionedDataError(f"training covariance not factorizable: {exc}") from exc
    sigma_ud = gram(tp, dp, h)
    alpha = chol_solve(l_dd, train.y - prior_mean(train.n, h))
    mean = prior_mean(len(tp), h) + sigma_ud @ alpha
    w = half_solve(l_dd, sigma_ud.T)
    variance = np.full(len(tp), h.prior_var) - np.einsum("ij,ij->j", w, w)
    cov = None
    if want_cov:
        cov = gram(tp, tp, h) - w.T @ w
        variance = np.diag(cov).copy()
    return Prediction(mean, variance, cov)


def pic_predict_direct(
    train: Dataset,
    test,
    h: Hyperparams,
    support: SupportSet,
    part: BlockPartition,
    want_cov: bool = False,
) -> Prediction:
    """Block-independent residual predictor by direct dense inversion.

    The prior keeps the exact covariance inside each diagonal block and
    the low-rank projection Q everywhere else (the zero-bandwidth end of
    the Markov spectrum).  Intended for small instances and cross-checks.
    """
    if train.y is None:
        raise ValueError("training set has no outputs")
    tp = _test_points(train, test)
    ops = ResidualOps(train, support, h)
    d_perm = part.train_perm()
    u_perm = part.test_perm()
    dp = train.points(d_perm)
    up_all = tp.take(u_perm) if len(tp) else tp

    sbar_dd = ops.q(dp, dp)
    sbar_ud = ops.q(up_all, dp) if len(tp) else np.zeros((0, train.n))
    sbar_uu = ops.q(up_all, up_all) if len(tp) else np.zeros((0, 0))

    d_starts = np.concatenate([[0], np.cumsum([len(b) for b in part.train_blocks])])
    u_starts = np.concatenate([[0], np.cumsum([len(b) for b in part.test_blocks])])
    for m in range(part.M):
        pd = train.points(part.train_blocks[m])
        dl, dh = d_starts[m], d_starts[m + 1]
        sbar_dd[dl:dh, dl:dh] += ops.r(pd, pd)
        if len(part.test_blocks[m]):
            pu = tp.take(part.test_blocks[m])
            ul, uh = u_starts[m], u_starts[m + 1]
            sbar_ud[ul:uh, dl:dh] += ops.r(pu, pd)
            sbar_uu[ul:uh, ul:uh] += ops.r(pu, pu)

    try:
        l_dd, _ = cholesky_jittered(0.5 * (sbar_dd + sbar_dd.T))
    except NotPositiveDefiniteError as exc:
        raise IllConditionedDataError(f"prior covariance not factorizable: {exc}") from exc
    resid = train.y[d_perm] - prior_mean(train.n, h)
    mean_perm = prior_mean(len(tp), h) + sbar_ud @ chol_solve(l_dd, resid)
    w = half_solve(l_dd, sbar_ud.T)
    cov_perm = sbar_uu - w.T @ w
    var_perm = np.diag(cov_perm).copy()

    inv = np.empty(len(tp), dtype=np.int64)
    inv[u_perm] = np.arange(len(tp))
    mean = mean_perm[inv]
    variance = var_perm[inv]
    cov = cov_perm[np.ix_(inv, inv)] if want_cov else None
    return Prediction(mean, variance, cov)
