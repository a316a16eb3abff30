"""Low-rank plus block-Markov residual GP approximation (the LMA predictor).

The prior covariance over V = D (train) and U (test) splits into a
low-rank projection Q through a support set S and a residual R.  The
residual is approximated blockwise: exact within a band of ``markov_order``
blocks around the diagonal, and by a recursive reduced-rank product
through the intervening bands outside it.  With bandwidth 0 this is the
block-independent (PIC) prior; with bandwidth M-1 it is the exact prior.

Two prediction routes are provided:

* ``lma_predict_direct`` assembles the approximate prior densely and
  solves it directly.  O(n^3); reference implementation for tests.
* ``lma_predict_summary`` exploits the block-banded inverse of the
  approximated residual: each block contributes a local summary
  (y_dot, R_dot, Sigma_dot_S, Sigma_dot_U), the summaries aggregate
  into a global summary, and the predictor reads off the global
  summary.  Runs in O(|D||S|^2 + B|D|(B|D|/M)^2 + |U||D|(|S|+B|D|/M))
  sequentially; the parallel module distributes the same computation.

Global-summary sums run in ascending block order always; floating-point
determinism is part of the contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .baselines import Prediction, pic_predict_direct
from .blockmat import (
    BlockConditioner,
    ResidualOps,
    block_conditioner,
    chol_solve,
    cholesky_jittered,
    half_solve,
)
from .data import Dataset
from .kernel import Hyperparams, PointSet, gram, prior_mean
from .partition import BlockPartition, SupportSet, partition_inputs, select_support

__all__ = [
    "LmaConfig",
    "LocalSummary",
    "GlobalSummary",
    "SummaryContribution",
    "LmaWorkspace",
    "rbar_block",
    "sigma_bar_block",
    "local_summary",
    "summary_contribution",
    "global_summary",
    "lma_predict_direct",
    "lma_predict_summary",
]


@dataclass(frozen=True)
class LmaConfig:
    """Approximation knobs: Markov order B, support size |S|, block count M."""

    markov_order: int
    support_size: int
    blocks: int
    partition_seed: int = 0
    support_seed: int = 1

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be at least 1")
        if self.support_size < 1:
            raise ValueError("support_size must be at least 1")
        if not 0 <= self.markov_order <= self.blocks - 1:
            raise ValueError(
                f"markov_order must be in [0, {self.blocks - 1}], got {self.markov_order}"
            )


def setup_problem(train: Dataset, test, h: Hyperparams, config: LmaConfig):
    """Partition, support set, and cached Q/R ops for one prediction run."""
    part = partition_inputs(train, test, config.blocks, config.partition_seed)
    support = select_support(train, config.support_size, config.support_seed)
    ops = ResidualOps(train, support, h)
    return part, support, ops


# ---------------------------------------------------------------------------
# Recursive band-residual blocks over V x V (direct route)
# ---------------------------------------------------------------------------


class LmaWorkspace:
    """Memoized residual-band recursion over joint train/test blocks.

    Computes blocks of the approximated residual and prior on demand;
    the upper triangle is computed and the lower mirrored by transpose.
    """

    def __init__(
        self,
        train: Dataset,
        test,
        h: Hyperparams,
        part: BlockPartition,
        support: SupportSet,
        markov_order: int,
    ):
        if not 0 <= markov_order <= part.M - 1:
            raise ValueError(f"markov_order must be in [0, {part.M - 1}]")
        self.train = train
        self.h = h
        self.part = part
        self.bandwidth = markov_order
        self.ops = ResidualOps(train, support, h)
        tp = _test_pointset(train, test)
        self.test_points = tp
        self.v_points = []
        self.d_sizes = []
        self.u_sizes = []
        for m in range(part.M):
            d_idx = part.train_blocks[m]
            u_idx = part.test_blocks[m]
            coords = np.vstack([train.X[d_idx], tp.coords[u_idx]])
            ids = np.concatenate([d_idx, tp.ids[u_idx]])
            self.v_points.append(PointSet(coords, ids))
            self.d_sizes.append(d_idx.size)
            self.u_sizes.append(u_idx.size)
        self._rbar_cache: dict = {}
        self._rprime_v: dict = {}

    def _rprime_vblock(self, m: int) -> np.ndarray:
        """R_{V_m, band} R_{band, band}^{-1} for the recursion at block m."""
        if m not in self._rprime_v:
            band_idx = self.part.band_after(m, self.bandwidth)
            vp = self.v_points[m - 1]
            if band_idx.size == 0:
                self._rprime_v[m] = np.zeros((len(vp), 0))
            else:
                pb = self.train.points(band_idx)
                r_vb = self.ops.r(vp, pb)
                r_bb = self.ops.r(pb, pb)
                l_bb, _ = cholesky_jittered(0.5 * (r_bb + r_bb.T))
                self._rprime_v[m] = chol_solve(l_bb, r_vb.T).T
        return self._rprime_v[m]

    def rbar_block(self, m: int, n: int) -> np.ndarray:
        """Approximated residual block over V_m x V_n (1-based indices)."""
        M, B = self.part.M, self.bandwidth
        if not (1 <= m <= M and 1 <= n <= M):
            raise ValueError(f"block indices out of range: ({m}, {n})")
        if m > n:
            return self.rbar_block(n, m).T
        key = (m, n)
        if key not in self._rbar_cache:
            if n - m <= B:
                blk = self.ops.r(self.v_points[m - 1], self.v_points[n - 1])
            elif B == 0:
                blk = np.zeros((len(self.v_points[m - 1]), len(self.v_points[n - 1])))
            else:
                stack = np.vstack(
                    [
                        self.rbar_block(k, n)[: self.d_sizes[k - 1], :]
                        for k in range(m + 1, min(m + B, M) + 1)
                    ]
                )
                blk = self._rprime_vblock(m) @ stack
            self._rbar_cache[key] = blk
        return self._rbar_cache[key]

    def sigma_bar_block(self, m: int, n: int) -> np.ndarray:
        """Approximate prior block over V_m x V_n: exact within the band."""
        if abs(m - n) <= self.bandwidth:
            return self.ops.sigma(self.v_points[m - 1], self.v_points[n - 1])
        return self.ops.q(self.v_points[m - 1], self.v_points[n - 1]) + self.rbar_block(m, n)

    def _positions(self):
        """Row positions of D and U entries inside the dense block-ordered V."""
        d_pos, u_pos = [], []
        at = 0
        for m in range(self.part.M):
            d_pos.append(np.arange(at, at + self.d_sizes[m]))
            at += self.d_sizes[m]
            u_pos.append(np.arange(at, at + self.u_sizes[m]))
            at += self.u_sizes[m]
        return np.concatenate(d_pos), np.concatenate(u_pos)

    def rbar_dense(self, subset: str = "V") -> np.ndarray:
        """Dense approximated residual over V, D, or U (block order)."""
        M = self.part.M
        full = np.block([[self.rbar_block(m, n) for n in range(1, M + 1)] for m in range(1, M + 1)])
        return self._slice(full, subset)

    def sigma_bar_dense(self, subset: str = "V") -> np.ndarray:
        M = self.part.M
        full = np.block(
            [[self.sigma_bar_block(m, n) for n in range(1, M + 1)] for m in range(1, M + 1)]
        )
        return self._slice(full, subset)

    def _slice(self, full: np.ndarray, subset: str) -> np.ndarray:
        d_pos, u_pos = self._positions()
        if subset == "V":
            return full
        if subset == "D":
            return full[np.ix_(d_pos, d_pos)]
        if subset == "U":
            return full[np.ix_(u_pos, u_pos)]
        if subset == "UD":
            return full[np.ix_(u_pos, d_pos)]
        raise ValueError(f"unknown subset {subset!r}")


def rbar_block(m, n, train, test, h, part, support, markov_order) -> np.ndarray:
    """One-off evaluation of an approximated residual block (see LmaWorkspace)."""
    ws = LmaWorkspace(train, test, h, part, support, markov_order)
    return ws.rbar_block(m, n)


def sigma_bar_block(m, n, train, test, h, part, support, markov_order) -> np.ndarray:
    ws = LmaWorkspace(train, test, h, part, support, markov_order)
    return ws.sigma_bar_block(m, n)


def _test_pointset(train: Dataset, test) -> PointSet:
    if isinstance(test, PointSet):
        return test
    X = test.X if isinstance(test, Dataset) else np.asarray(test, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return PointSet(X, train.n + np.arange(X.shape[0], dtype=np.int64))


# ---------------------------------------------------------------------------
# Direct predictor (dense reference)
# ---------------------------------------------------------------------------


def lma_predict_direct(
    train: Dataset, test, h: Hyperparams, config: LmaConfig, want_cov: bool = False
) -> Prediction:
    """Dense assembly of the approximate prior and a direct solve.

    O(n^3) like the full GP; reference implementation for small instances.
    """
    if train.y is None:
        raise ValueError("training set has no outputs")
    part, support, _ = setup_problem(train, test, h, config)
    ws = LmaWorkspace(train, test, h, part, support, config.markov_order)
    full = ws.sigma_bar_dense("V")
    d_pos, u_pos = ws._positions()
    sbar_dd = full[np.ix_(d_pos, d_pos)]
    sbar_ud = full[np.ix_(u_pos, d_pos)]
    sbar_uu = full[np.ix_(u_pos, u_pos)]

    l_dd, _ = cholesky_jittered(0.5 * (sbar_dd + sbar_dd.T))
    d_perm = part.train_perm()
    u_perm = part.test_perm()
    resid = train.y[d_perm] - prior_mean(train.n, h)
    mean_perm = prior_mean(u_perm.size, h) + sbar_ud @ chol_solve(l_dd, resid)
    w = half_solve(l_dd, sbar_ud.T)
    cov_perm = sbar_uu - w.T @ w

    inv = np.empty(u_perm.size, dtype=np.int64)
    inv[u_perm] = np.arange(u_perm.size)
    return Prediction(
        mean_perm[inv],
        np.diag(cov_perm).copy()[inv],
        cov_perm[np.ix_(inv, inv)] if want_cov else None,
    )


# ---------------------------------------------------------------------------
# Summary-form predictor
# ---------------------------------------------------------------------------


@dataclass
class LocalSummary:
    """Per-block summary (y_dot, R_dot, Sigma_dot_S, Sigma_dot_U).

    ``schur_chol`` is the lower Cholesky factor of R_dot^{-1}; products
    against R_dot go through it so aggregate matrices stay symmetric
    PSD by construction.  For the last block the conditioning band is
    empty and every correction term vanishes.
    """

    m: int
    y_dot: np.ndarray
    sigma_dot_s: np.ndarray
    sigma_dot_u: np.ndarray
    schur_chol: np.ndarray

    @cached_property
    def r_dot(self) -> np.ndarray:
        """The SPD matrix R_dot (inverse of the residual Schur complement)."""
        inv = chol_solve(self.schur_chol, np.eye(self.schur_chol.shape[0]))
        return 0.5 * (inv + inv.T)


@dataclass
class SummaryContribution:
    """Block m's summand in each global-summary sum.

    ``uu_blockdiag``, when present, holds the (U_n, U_n) diagonal
    sub-blocks of the test-test term; the master scatters their sums to
    the per-block predictors.
    """

    m: int
    y_s: np.ndarray
    y_u: np.ndarray
    ss: np.ndarray
    us: np.ndarray
    uu_diag: np.ndarray
    uu: np.ndarray | None = None
    uu_blockdiag: list | None = None


@dataclass
class GlobalSummary:
    """Aggregated summaries; ``sigma_ddot_uu`` is filled only when requested."""

    y_ddot_s: np.ndarray
    y_ddot_u: np.ndarray
    sigma_ddot_ss: np.ndarray
    sigma_ddot_us: np.ndarray
    sigma_ddot_uu_diag: np.ndarray
    sigma_ddot_uu: np.ndarray | None = None
    sigma_ddot_uu_blockdiag: list | None = None


def local_summary(
    m: int,
    train: Dataset,
    part: BlockPartition,
    ops: ResidualOps,
    cond: BlockConditioner,
    cross_sigma: dict,
    h: Hyperparams,
) -> LocalSummary:
    """Local summary of block m given the precomputed prior cross rows.

    ``cross_sigma[k]`` holds the approximate prior rows over (D_k, U) in
    block-ordered test columns.
    """
    idx_m = part.train_blocks[m - 1]
    y_m = train.y[idx_m] - prior_mean(idx_m.size, h)
    pm = train.points(idx_m)
    sigma_ms = ops.sigma_s(pm)
    if cond.band_idx.size:
        y_b = train.y[cond.band_idx] - prior_mean(cond.band_idx.size, h)
        pb = train.points(cond.band_idx)
        sigma_bs = ops.sigma_s(pb)
        y_dot = y_m - cond.rprime @ y_b
        sigma_dot_s = sigma_ms - cond.rprime @ sigma_bs
        # accumulate band-row corrections blockwise (no wide temporaries)
        sigma_dot_u = cross_sigma[m].copy()
        at = 0
        for k in _band_blocks(part, m, cond.bandwidth):
            width = part.train_blocks[k - 1].size
            sigma_dot_u -= cond.rprime[:, at : at + width] @ cross_sigma[k]
            at += width
    else:
        y_dot = y_m
        sigma_dot_s = sigma_ms
        sigma_dot_u = cross_sigma[m].copy()
    return LocalSummary(m, y_dot, sigma_dot_s, sigma_dot_u, cond.schur_chol)


def _band_blocks(part: BlockPartition, m: int, bandwidth: int):
    return list(range(m + 1, min(m + bandwidth, part.M) + 1))


def summary_contribution(
    ls: LocalSummary, full_uu: bool = False, u_block_sizes=None
) -> SummaryContribution:
    """Block m's terms of the global sums.

    The support-side terms go through half-solves against R_dot^{-1} so
    Sigma_ddot_SS stays symmetric PSD by construction; the wide test-side
    terms use one product against the cached R_dot, which is far kinder
    to caches and worker threads than a wide triangular solve, and are
    symmetrized where symmetry matters.
    """
    w_y = half_solve(ls.schur_chol, ls.y_dot)
    w_s = half_solve(ls.schur_chol, ls.sigma_dot_s)
    t_u = ls.r_dot @ ls.sigma_dot_u if ls.sigma_dot_u.size else ls.sigma_dot_u
    uu_blockdiag = None
    if u_block_sizes is not None:
        starts = np.concatenate([[0], np.cumsum(u_block_sizes)])
        uu_blockdiag = []
        for i in range(len(u_block_sizes)):
            sl = slice(starts[i], starts[i + 1])
            blk = ls.sigma_dot_u[:, sl].T @ t_u[:, sl]
            uu_blockdiag.append(0.5 * (blk + blk.T))
        uu_diag = (
            np.concatenate([np.diag(b) for b in uu_blockdiag])
            if uu_blockdiag
            else np.zeros(0)
        )
    else:
        uu_diag = np.einsum("ij,ij->j", ls.sigma_dot_u, t_u)
    uu = None
    if full_uu:
        uu = ls.sigma_dot_u.T @ t_u
        uu = 0.5 * (uu + uu.T)
    return SummaryContribution(
        m=ls.m,
        y_s=w_s.T @ w_y,
        y_u=t_u.T @ ls.y_dot,
        ss=w_s.T @ w_s,
        us=t_u.T @ ls.sigma_dot_s,
        uu_diag=uu_diag,
        uu=uu,
        uu_blockdiag=uu_blockdiag,
    )


def global_summary(
    contributions, sigma_ss: np.ndarray, full_uu: bool = False
) -> GlobalSummary:
    """Sum the per-block contributions in ascending block order.

    Accepts LocalSummary or SummaryContribution items in any order; the
    reduction itself is always performed in ascending m (determinism
    contract for parallel runs).
    """
    items = [
        c if isinstance(c, SummaryContribution) else summary_contribution(c, full_uu)
        for c in contributions
    ]
    items.sort(key=lambda c: c.m)
    if len({c.m for c in items}) != len(items):
        raise ValueError("duplicate block contributions")
    n_u = items[0].y_u.size
    n_s = sigma_ss.shape[0]
    with_blockdiag = all(c.uu_blockdiag is not None for c in items)
    gs = GlobalSummary(
        y_ddot_s=np.zeros(n_s),
        y_ddot_u=np.zeros(n_u),
        sigma_ddot_ss=sigma_ss.copy(),
        sigma_ddot_us=np.zeros((n_u, n_s)),
        sigma_ddot_uu_diag=np.zeros(n_u),
        sigma_ddot_uu=np.zeros((n_u, n_u)) if full_uu else None,
        sigma_ddot_uu_blockdiag=(
            [np.zeros(b.shape) for b in items[0].uu_blockdiag] if with_blockdiag else None
        ),
    )
    for c in items:
        if c.ss.shape != (n_s, n_s) or c.y_u.shape != (n_u,):
            raise ValueError(f"contribution {c.m} has inconsistent shapes")
        gs.y_ddot_s += c.y_s
        gs.y_ddot_u += c.y_u
        gs.sigma_ddot_ss += c.ss
        gs.sigma_ddot_us += c.us
        gs.sigma_ddot_uu_diag += c.uu_diag
        if with_blockdiag:
            for acc, blk in zip(gs.sigma_ddot_uu_blockdiag, c.uu_blockdiag):
                acc += blk
        if full_uu:
            if c.uu is None:
                raise ValueError(f"contribution {c.m} lacks the full U x U term")
            gs.sigma_ddot_uu += c.uu
    return gs


# ---------------------------------------------------------------------------
# Cross-block computation (shared by the centralized and parallel engines)
# ---------------------------------------------------------------------------


def exact_cross_block(ops: ResidualOps, a: PointSet, b: PointSet) -> np.ndarray:
    """Within-band prior cross block: the exact covariance."""
    return ops.sigma(a, b)


def offband_cross_block(ops, a, b, rbar: np.ndarray) -> np.ndarray:
    """Off-band prior cross block: low-rank projection plus residual recursion."""
    return ops.q(a, b) + rbar


def recurse_step(rprime: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """One reduced-rank recursion step through a conditioning band."""
    return rprime @ stack


class QRowFactory:
    """Low-rank cross rows against a fixed block-ordered test set.

    The support solve is applied to the narrow row Grams (one solve per
    row block) and the wide side stays a plain matrix product, which is
    the cache-friendly and thread-friendly grouping.  Used identically
    by the centralized sweep and the parallel workers, so the two
    engines see the same arithmetic.
    """

    def __init__(self, ops: ResidualOps, u_all: PointSet, u_sizes, su: np.ndarray | None = None):
        self.ops = ops
        self.su = su if su is not None else gram(ops.s_points, u_all, ops.h)
        self.starts = np.concatenate([[0], np.cumsum(u_sizes)])

    def cols(self, n: int):
        return slice(self.starts[n - 1], self.starts[n])

    def row_weights(self, row_gram_s: np.ndarray) -> np.ndarray:
        """Sigma_{rows,S} Sigma_SS^{-1}, the left factor of a Q row."""
        return chol_solve(self.ops.lss, row_gram_s.T).T

    def q_row(self, weights: np.ndarray) -> np.ndarray:
        """Q over (rows, all test points) from precomputed row weights."""
        return weights @ self.su

    def q_block(self, weights: np.ndarray, n: int) -> np.ndarray:
        return weights @ self.su[:, self.cols(n)]


def uband_rprime(
    ops: ResidualOps,
    cond: BlockConditioner,
    u_points: PointSet,
    band_points: PointSet | None = None,
) -> np.ndarray:
    """R_{U_n, band} R_{band,band}^{-1} for the transpose recursion at block n."""
    if cond.band_idx.size == 0 or len(u_points) == 0:
        return np.zeros((len(u_points), cond.band_idx.size))
    pb = band_points if band_points is not None else ops.train.points(cond.band_idx)
    r_ub = ops.r(u_points, pb)
    return chol_solve(cond.band_chol, r_ub.T).T


def centralized_cross_residual(
    train: Dataset,
    part: BlockPartition,
    ops: ResidualOps,
    conds: dict,
    tp: PointSet,
    bandwidth: int,
    want_uu: bool = False,
):
    """Band-approximated residual rows over (D_m, U) for every block m.

    Returns ``(wg, rbar_rows, qf, sigma_bar_uu)``: the low-rank row
    weights, the residual rows (test columns in block order), the row
    factory, and, when requested, the band-approximated test-test
    prior.  The prior row is ``wg[m] @ qf.su + rbar_rows[m]``.
    Within-band blocks are exact residuals; upper off-band blocks come
    from the forward recursion; lower off-band blocks from the
    transpose recursion through the train-train off-band blocks,
    exactly the schedule the parallel engine distributes.
    """
    M, B = part.M, bandwidth
    d_points = {m: train.points(part.train_blocks[m - 1]) for m in range(1, M + 1)}
    u_points = {n: tp.take(part.test_blocks[n - 1]) for n in range(1, M + 1)}
    u_all = tp.take(part.test_perm())
    u_sizes = [len(part.test_blocks[n - 1]) for n in range(1, M + 1)]
    qf = QRowFactory(ops, u_all, u_sizes)
    wg = {m: qf.row_weights(ops.sigma_s(d_points[m])) for m in range(1, M + 1)}
    uu_blocks: dict = {}
    wg_u = (
        {m: qf.row_weights(ops.sigma_s(u_points[m])) for m in range(1, M + 1)}
        if want_uu
        else None
    )

    # Every block of a residual row is written exactly once.
    rbar_rows = {m: np.empty((len(d_points[m]), len(u_all))) for m in range(1, M + 1)}
    for m in range(1, M + 1):
        for n in range(max(1, m - B), min(M, m + B) + 1):
            g = exact_cross_block(ops, d_points[m], u_points[n])
            rbar_rows[m][:, qf.cols(n)] = g - qf.q_block(wg[m], n)
            if want_uu and n >= m:
                uu_blocks[(m, n)] = exact_cross_block(ops, u_points[m], u_points[n])

    if B > 0:
        rpu = {n: uband_rprime(ops, conds[n], u_points[n]) for n in range(1, M - B)}

        # Upper off-band (test block right of the train block): forward recursion.
        for j in range(B + 1, M):
            for m in range(1, M - j + 1):
                n = m + j
                stack = np.vstack(
                    [rbar_rows[k][:, qf.cols(n)] for k in _band_blocks(part, m, B)]
                )
                rbar_rows[m][:, qf.cols(n)] = recurse_step(conds[m].rprime, stack)
                if want_uu:
                    uu_blocks[(m, n)] = qf.q_block(wg_u[m], n) + recurse_step(
                        rpu[m], stack
                    )

        # Lower off-band: recurse over train-train blocks, then transpose.
        rbar_dd: dict = {}
        for j in range(B + 1, M):
            for n in range(1, M - j + 1):
                mm = n + j
                stack = np.vstack(
                    [
                        rbar_dd[(k, mm)]
                        if mm - k > B
                        else ops.r(d_points[k], d_points[mm])
                        for k in _band_blocks(part, n, B)
                    ]
                )
                rbar_dd[(n, mm)] = recurse_step(conds[n].rprime, stack)
                rbar_rows[mm][:, qf.cols(n)] = recurse_step(rpu[n], stack).T
            # Diagonals older than the band are never read again.
            for key in [k for k in rbar_dd if k[1] - k[0] <= j - B]:
                del rbar_dd[key]

    sigma_uu = None
    if want_uu:
        starts = qf.starts
        sigma_uu = np.zeros((starts[-1], starts[-1]))
        for m in range(1, M + 1):
            for n in range(m, M + 1):
                blk = uu_blocks[(m, n)]
                sigma_uu[starts[m - 1] : starts[m], starts[n - 1] : starts[n]] = blk
                if n > m:
                    sigma_uu[starts[n - 1] : starts[n], starts[m - 1] : starts[m]] = blk.T
    return wg, rbar_rows, qf, sigma_uu


def centralized_cross_sigma(
    train: Dataset,
    part: BlockPartition,
    ops: ResidualOps,
    conds: dict,
    tp: PointSet,
    bandwidth: int,
    want_uu: bool = False,
):
    """Approximate prior rows Sigma_bar over (D_m, U) for every block m.

    Returns ``({m: matrix(|D_m|, |U|)}, sigma_bar_uu)`` with test columns
    in block order; within-band blocks are the exact covariances.
    """
    M, B = part.M, bandwidth
    wg, rbar_rows, qf, sigma_uu = centralized_cross_residual(
        train, part, ops, conds, tp, bandwidth, want_uu
    )
    rows = {}
    for m in range(1, M + 1):
        row = wg[m] @ qf.su + rbar_rows[m]
        dm = train.points(part.train_blocks[m - 1])
        for n in range(max(1, m - B), min(M, m + B) + 1):
            row[:, qf.cols(n)] = exact_cross_block(
                ops, dm, tp.take(part.test_blocks[n - 1])
            )
        rows[m] = row
    return rows, sigma_uu


def combined_local_summary(
    m: int,
    cond: BlockConditioner,
    y_centered_m: np.ndarray,
    y_centered_band: np.ndarray,
    sigma_ms: np.ndarray,
    sigma_bs: np.ndarray,
    wg_own: np.ndarray,
    wg_band: list,
    rbar_own: np.ndarray,
    rbar_band: list,
    qf: QRowFactory,
    band_widths: list,
) -> LocalSummary:
    """Local summary from low-rank weights plus residual rows.

    The conditioning correction is applied to the small weight matrices
    first, so the wide projection costs a single product; the residual
    rows are corrected blockwise.  Used by both the centralized
    predictor and the parallel workers.
    """
    if cond.band_idx.size:
        y_dot = y_centered_m - cond.rprime @ y_centered_band
        sigma_dot_s = sigma_ms - cond.rprime @ sigma_bs
        w_comb = wg_own.copy()
        resid = rbar_own.copy()
        at = 0
        for width, wg_k, rbar_k in zip(band_widths, wg_band, rbar_band):
            sl = slice(at, at + width)
            w_comb -= cond.rprime[:, sl] @ wg_k
            resid -= cond.rprime[:, sl] @ rbar_k
            at += width
        sigma_dot_u = w_comb @ qf.su + resid
    else:
        y_dot = y_centered_m
        sigma_dot_s = sigma_ms
        sigma_dot_u = wg_own @ qf.su + rbar_own
    return LocalSummary(m, y_dot, sigma_dot_s, sigma_dot_u, cond.schur_chol)


def lma_predict_summary(
    train: Dataset, test, h: Hyperparams, config: LmaConfig, want_cov: bool = False
) -> Prediction:
    """Summary-form predictor; never forms the dense approximate prior.

    Requires markov_order >= 1; order 0 routes to the direct
    block-independent predictor, whose prior it equals exactly.
    """
    if train.y is None:
        raise ValueError("training set has no outputs")
    part, support, ops = setup_problem(train, test, h, config)
    if config.markov_order == 0:
        return pic_predict_direct(train, test, h, support, part, want_cov)
    B = config.markov_order
    tp = _test_pointset(train, test)
    conds = {m: block_conditioner(ops, part, B, m) for m in range(1, part.M + 1)}
    wg, rbar_rows, qf, sigma_uu = centralized_cross_residual(
        train, part, ops, conds, tp, B, want_uu=want_cov
    )
    u_sizes = [len(b) for b in part.test_blocks]
    contribs = []
    for m in range(1, part.M + 1):
        idx_m = part.train_blocks[m - 1]
        band_ids = _band_blocks(part, m, B)
        cond = conds[m]
        ls = combined_local_summary(
            m,
            cond,
            train.y[idx_m] - prior_mean(idx_m.size, h),
            train.y[cond.band_idx] - prior_mean(cond.band_idx.size, h),
            ops.sigma_s(train.points(idx_m)),
            ops.sigma_s(train.points(cond.band_idx)),
            wg[m],
            [wg[k] for k in band_ids],
            rbar_rows[m],
            [rbar_rows[k] for k in band_ids],
            qf,
            [part.train_blocks[k - 1].size for k in band_ids],
        )
        contribs.append(
            summary_contribution(ls, full_uu=want_cov, u_block_sizes=u_sizes)
        )
    gs = global_summary(contribs, ops.sigma_ss, full_uu=want_cov)
    mean_perm, var_perm, cov_perm = predict_from_global_summary(
        gs, h, want_cov, sigma_uu
    )
    u_perm = part.test_perm()
    inv = np.empty(u_perm.size, dtype=np.int64)
    inv[u_perm] = np.arange(u_perm.size)
    return Prediction(
        mean_perm[inv],
        var_perm[inv],
        cov_perm[np.ix_(inv, inv)] if want_cov else None,
    )


def predict_from_global_summary(
    gs: GlobalSummary,
    h: Hyperparams,
    want_cov: bool,
    sigma_bar_uu: np.ndarray | None = None,
):
    """Mean/variance (block-ordered) from the aggregated global summary.

    The covariance line subtracts from the band-approximated test-test
    prior ``sigma_bar_uu``, whose diagonal blocks are the exact Gram, so
    per-point variances depend only on the prior variance.
    """
    l_gg, _ = cholesky_jittered(0.5 * (gs.sigma_ddot_ss + gs.sigma_ddot_ss.T))
    n_u = gs.y_ddot_u.size
    mean = prior_mean(n_u, h) + gs.y_ddot_u - gs.sigma_ddot_us @ chol_solve(l_gg, gs.y_ddot_s)
    w = half_solve(l_gg, gs.sigma_ddot_us.T)
    correction = np.einsum("ij,ij->j", w, w)
    var = np.full(n_u, h.prior_var) - gs.sigma_ddot_uu_diag + correction
    cov = None
    if want_cov:
        if sigma_bar_uu is None:
            raise ValueError("full covariance requires the test-test prior")
        cov = sigma_bar_uu - gs.sigma_ddot_uu + w.T @ w
    return mean, var, cov
