"""Structure tests for the band-approximated residual: the banded inverse,
its block-sparse Cholesky factor, the trace identity, and KL optimality."""

import numpy as np
import pytest

from conftest import make_instance
from lmagp.blockmat import banded_inverse_cholesky, kl_distance, support_gram
from lmagp.kernel import gram
from lmagp.lma import LmaConfig, LmaWorkspace, setup_problem
from scipy.linalg import cholesky as upper_cholesky


def _residual_setup(seed=0, n=48, d=2, M=4, s=8):
    train, _, h = make_instance(seed=seed, n=n, d=d, t=0)
    cfg = LmaConfig(1, s, M)
    part, support, ops = setup_problem(train, None, h, cfg)
    return train, h, part, support, ops


def _dense_residual(train, h, part, support):
    perm = part.train_perm()
    dp = train.points(perm)
    sp = support.points(train)
    sig = gram(dp, dp, h)
    q = gram(dp, sp, h) @ np.linalg.inv(support_gram(sp, h)) @ gram(sp, dp, h)
    return sig - q


def _block_starts(part):
    sizes = [b.size for b in part.train_blocks]
    return np.concatenate([[0], np.cumsum(sizes)])


def _offband_max(mat, part, bandwidth):
    st = _block_starts(part)
    worst = 0.0
    for m in range(1, part.M + 1):
        for n in range(1, part.M + 1):
            if abs(m - n) > bandwidth:
                blk = mat[st[m - 1] : st[m], st[n - 1] : st[n]]
                if blk.size:
                    worst = max(worst, float(np.max(np.abs(blk))))
    return worst


@pytest.mark.parametrize("seed,M,B", [(0, 4, 1), (1, 4, 2), (2, 5, 1), (3, 3, 2)])
def test_banded_inverse_property(seed, M, B):
    # Assembling the approximated residual densely and inverting it must
    # leave the off-band blocks at numerical zero.
    train, _, h2 = make_instance(seed=seed, n=50, d=2, t=0)
    cfg = LmaConfig(B, 10, M)
    part, support, _ = setup_problem(train, None, h2, cfg)
    ws = LmaWorkspace(train, np.zeros((0, 2)), h2, part, support, B)
    rbar = ws.rbar_dense("D")
    rinv = np.linalg.inv(rbar)
    assert _offband_max(rinv, part, B) <= 1e-8 * np.max(np.abs(rinv))


@pytest.mark.parametrize("B", [1, 2])
def test_trace_identity(B):
    train, _, h = make_instance(seed=4, n=48, d=2, t=0)
    cfg = LmaConfig(B, 9, 4)
    part, support, _ = setup_problem(train, None, h, cfg)
    ws = LmaWorkspace(train, np.zeros((0, 2)), h, part, support, B)
    rbar = ws.rbar_dense("D")
    r = _dense_residual(train, h, part, support)
    tr = float(np.trace(np.linalg.solve(rbar, r)))
    assert tr == pytest.approx(train.n, rel=1e-6)


def _random_banded_inverse_spd(rng, sizes, bandwidth):
    """SPD matrix whose inverse is block-banded, built from a random
    factor with the block-sparse upper structure."""
    M = len(sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    n = starts[-1]
    u = np.zeros((n, n))
    for m in range(M):
        a = rng.standard_normal((sizes[m], sizes[m]))
        u_mm = upper_cholesky(a @ a.T + sizes[m] * np.eye(sizes[m]), lower=False)
        u[starts[m] : starts[m + 1], starts[m] : starts[m + 1]] = u_mm
        hi = min(m + bandwidth, M - 1)
        if hi > m:
            width = starts[hi + 1] - starts[m + 1]
            u[starts[m] : starts[m + 1], starts[m + 1] : starts[hi + 1]] = (
                0.3 * rng.standard_normal((sizes[m], width))
            )
    return np.linalg.inv(u.T @ u)


@pytest.mark.parametrize("B", [1, 2])
def test_kl_optimality_among_banded_inverse_matrices(B):
    train, _, h = make_instance(seed=5, n=40, d=2, t=0)
    cfg = LmaConfig(B, 8, 4)
    part, support, _ = setup_problem(train, None, h, cfg)
    ws = LmaWorkspace(train, np.zeros((0, 2)), h, part, support, B)
    rbar = ws.rbar_dense("D")
    r = _dense_residual(train, h, part, support)
    baseline = kl_distance(r, rbar)
    sizes = [b.size for b in part.train_blocks]
    rng = np.random.default_rng(6)
    for _ in range(100):
        rhat = _random_banded_inverse_spd(rng, sizes, B)
        assert kl_distance(r, rhat) >= baseline - 1e-9


def test_factor_zero_pattern_and_product():
    train, h, part, support, _ = _residual_setup(seed=7, n=48, M=4)
    B = 1
    factor = banded_inverse_cholesky(train, part, support, h, B)
    st = _block_starts(part)
    dense = factor.dense()
    for m in range(1, part.M + 1):
        for n in range(1, part.M + 1):
            blk = dense[st[m - 1] : st[m], st[n - 1] : st[n]]
            if m > n or n - m > B:
                assert np.all(blk == 0.0)
    ws = LmaWorkspace(train, np.zeros((0, 2)), h, part, support, B)
    rinv = np.linalg.inv(ws.rbar_dense("D"))
    utu = dense.T @ dense
    assert np.max(np.abs(utu - rinv)) <= 1e-8 * np.max(np.abs(rinv))


def test_factor_two_blocks_reproduces_residual_inverse():
    # With the band covering everything the factored matrix is the exact
    # residual, so U^T U must reproduce its inverse.
    train, h, part, support, _ = _residual_setup(seed=8, n=40, M=2)
    factor = banded_inverse_cholesky(train, part, support, h, 1)
    r = _dense_residual(train, h, part, support)
    rinv = np.linalg.inv(r)
    dense = factor.dense()
    assert np.max(np.abs(dense.T @ dense - rinv)) <= 1e-8 * np.max(np.abs(rinv))


def test_factor_last_block_has_empty_band():
    train, h, part, support, ops = _residual_setup(seed=9, n=36, M=3)
    factor = banded_inverse_cholesky(train, part, support, h, 1)
    M = part.M
    assert factor.band[M - 1].shape[1] == 0
    pm = train.points(part.train_blocks[M - 1])
    r_mm = ops.r(pm, pm)
    rdot = np.linalg.inv(r_mm)
    expected = upper_cholesky(0.5 * (rdot + rdot.T), lower=False)
    assert np.max(np.abs(factor.diag[M - 1] - expected)) < 1e-8


def test_apply_utu_matches_dense():
    train, h, part, support, _ = _residual_setup(seed=10, n=44, M=4)
    factor = banded_inverse_cholesky(train, part, support, h, 2)
    dense = factor.dense()
    rng = np.random.default_rng(11)
    x = rng.standard_normal(train.n)
    assert np.allclose(factor.apply_utu(x), dense.T @ (dense @ x), atol=1e-12)


def test_bandwidth_validation():
    train, h, part, support, _ = _residual_setup(seed=12, n=30, M=3)
    with pytest.raises(ValueError):
        banded_inverse_cholesky(train, part, support, h, 3)
    with pytest.raises(ValueError):
        banded_inverse_cholesky(train, part, support, h, -1)
