"""Block-structured dense linear algebra.

Houses the low-rank projection Q and residual R of the kernel matrix,
the jittered Cholesky guard, the Gaussian KL distance used to score
residual approximations, and the block-banded Cholesky factor of the
inverse of the band-approximated residual.

Every solve against Sigma_SS, R over a conditioning band, or a residual
Schur complement goes through Cholesky factors; explicit inverses appear
only where a small matrix itself is the result (and in test oracles).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky as scipy_cholesky, solve_triangular
from scipy.linalg.lapack import dpotrf

from .data import Dataset
from .kernel import Hyperparams, PointSet, gram
from .partition import BlockPartition, SupportSet

__all__ = [
    "NumericalError",
    "NotPositiveDefiniteError",
    "IllConditionedSupportError",
    "jitter_log",
    "cholesky_jittered",
    "q_matrix",
    "r_matrix",
    "kl_distance",
    "BlockMatrix",
    "CholeskyFactor",
    "ResidualOps",
    "BlockConditioner",
    "block_conditioner",
    "conditioner_from_pointsets",
    "banded_inverse_cholesky",
]


class NumericalError(Exception):
    """Numerical failure (exit code 3 at the CLI)."""


class NotPositiveDefiniteError(NumericalError):
    pass


class IllConditionedSupportError(NumericalError):
    pass


class _JitterLog:
    """Process-wide record of diagonal jitter applied by factorizations.

    Surfaced in run metadata so Cholesky rescues are diagnosable.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with getattr(self, "_lock", threading.Lock()):
            self._max = 0.0
            self._rescued = 0

    def record(self, jitter: float):
        if jitter > 0.0:
            with self._lock:
                self._max = max(self._max, jitter)
                self._rescued += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {"max_jitter": self._max, "jittered_factorizations": self._rescued}


jitter_log = _JitterLog()

_JITTER_BASE = 1e-10
_JITTER_RETRIES = 6


def cholesky_jittered(A: np.ndarray, max_retries: int = _JITTER_RETRIES):
    """Lower Cholesky factor of A + jitter*I, with an escalating jitter ladder.

    Ladder: 0, then 1e-10 * mean(diag(A)) growing tenfold per retry, at
    most ``max_retries`` retries.  Returns ``(L, jitter)`` and records the
    applied jitter in :data:`jitter_log`.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    scale = float(np.max(np.abs(A))) or 1.0
    if float(np.max(np.abs(A - A.T))) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")
    mean_diag = float(np.trace(A)) / n
    base = _JITTER_BASE * mean_diag if mean_diag > 0 else _JITTER_BASE
    ladder = [0.0] + [base * 10.0**k for k in range(max_retries)]
    eye = np.eye(n)
    for jitter in ladder:
        # raw potrf: no wrapper overhead and it releases the GIL,
        # which numpy's cholesky gufunc does not
        L, info = dpotrf(A if jitter == 0.0 else A + jitter * eye, lower=1, clean=1)
        if info < 0:
            raise ValueError(f"illegal value in Cholesky argument {-info}")
        if info == 0:
            jitter_log.record(jitter)
            return L, jitter
    raise NotPositiveDefiniteError(
        f"Cholesky failed after jitter ladder (base {base:.3e}, {max_retries} retries)"
    )


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve (L L^T) X = B given the lower factor L.

    Inputs are finite by construction, so the finiteness scan (which
    would also hold the GIL in worker threads) is skipped.
    """
    if L.shape[0] == 0:
        return np.zeros_like(B)
    return cho_solve((L, True), B, check_finite=False)


def half_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """L^{-1} B; Gram products of the result are symmetric PSD by construction."""
    if L.shape[0] == 0:
        return np.zeros_like(B)
    return solve_triangular(L, B, lower=True, check_finite=False)


def support_gram(s_points: PointSet, h: Hyperparams) -> np.ndarray:
    """Noise-free self-Gram of the latent support variables."""
    h0 = Hyperparams(h.signal_var, 0.0, h.lengthscales, h.prior_mean)
    return gram(s_points, s_points, h0)


# Support points whose pivoted-Cholesky pivot falls below this fraction of
# the largest diagonal entry are numerically dependent on the kept ones.
_SUPPORT_RANK_TOL = 1e-8


def effective_support(s_points: PointSet, h: Hyperparams):
    """Restrict the support to its numerically independent pivots.

    The support Gram carries no noise, so nearly coincident support
    points make it singular to working precision; keeping them poisons
    every downstream solve while changing the projection by at most the
    trailing pivot mass (~1e-8 of the signal variance).  Pivots are
    selected by pivoted Cholesky and reordered ascending, so the result
    is deterministic.
    """
    from scipy.linalg.lapack import dpstrf

    sigma = support_gram(s_points, h)
    if sigma.shape[0] <= 1:
        return s_points, sigma
    _, piv, rank, _ = dpstrf(sigma, lower=1, tol=_SUPPORT_RANK_TOL * np.max(np.diag(sigma)))
    if rank >= sigma.shape[0]:
        return s_points, sigma
    keep = np.sort(piv[:rank] - 1)
    kept = s_points.take(keep)
    return kept, sigma[np.ix_(keep, keep)]


class ResidualOps:
    """Q/R block computations for one (train, support, hyperparams) triple.

    Support variables are latent: their self-Gram carries no noise and
    their ids are disjoint from every data point, so the residual
    R = Sigma - Q keeps the observation noise on its diagonal and stays
    positive definite.  Caches the Sigma_SS factor so repeated block
    evaluations share one factorization.
    """

    def __init__(self, train: Dataset | None, support: SupportSet | None, h: Hyperparams,
                 s_points: PointSet | None = None):
        self.train = train
        self.h = h
        self.support = support
        requested = s_points if s_points is not None else support.points(train)
        self.s_points, self.sigma_ss = effective_support(requested, h)
        try:
            self.lss, self.jitter_ss = cholesky_jittered(self.sigma_ss)
        except NotPositiveDefiniteError as exc:
            raise IllConditionedSupportError(
                f"support Gram of size {len(self.s_points)} is not factorizable: {exc}"
            ) from exc

    @classmethod
    def from_points(cls, s_points: PointSet, h: Hyperparams) -> "ResidualOps":
        """Ops backed only by a support point copy (worker-shard usage)."""
        return cls(None, None, h, s_points=s_points)

    def sigma(self, A: PointSet, B: PointSet) -> np.ndarray:
        return gram(A, B, self.h)

    def sigma_s(self, A: PointSet) -> np.ndarray:
        """Sigma_{A,S}."""
        return gram(A, self.s_points, self.h)

    def q(self, A: PointSet, B: PointSet) -> np.ndarray:
        """Q_{A,B} = Sigma_{A,S} Sigma_SS^{-1} Sigma_{S,B} via the cached factor."""
        sa = self.sigma_s(A)
        if A is B or np.array_equal(A.ids, B.ids):
            w = half_solve(self.lss, sa.T)
            return w.T @ w
        sb = self.sigma_s(B)
        return sa @ chol_solve(self.lss, sb.T)

    def r(self, A: PointSet, B: PointSet) -> np.ndarray:
        """Residual covariance R_{A,B} = Sigma_{A,B} - Q_{A,B}."""
        return self.sigma(A, B) - self.q(A, B)


def q_matrix(B1, B2, S, h: Hyperparams, train: Dataset | None = None) -> np.ndarray:
    """Low-rank projection block Q_{B1,B2} over support set S.

    ``S`` may be a :class:`SupportSet` (with ``train`` supplying the
    coordinates) or a :class:`PointSet`/array of support inputs.
    """
    s_points = _support_points(S, train)
    if len(s_points) < 1:
        raise ValueError("support set must contain at least one point")
    s_points, sigma_ss = effective_support(s_points, h)
    try:
        lss, _ = cholesky_jittered(sigma_ss)
    except NotPositiveDefiniteError as exc:
        raise IllConditionedSupportError(str(exc)) from exc
    p1, p2 = _as_points(B1), _as_points(B2)
    s1 = gram(p1, s_points, h)
    if p1 is p2 or np.array_equal(p1.ids, p2.ids):
        w = half_solve(lss, s1.T)
        return w.T @ w
    s2 = gram(s_points, p2, h)
    return s1 @ chol_solve(lss, s2)


def r_matrix(B1, B2, S, h: Hyperparams, train: Dataset | None = None) -> np.ndarray:
    """Residual block R_{B1,B2} = Sigma_{B1,B2} - Q_{B1,B2}."""
    p1, p2 = _as_points(B1), _as_points(B2)
    return gram(p1, p2, h) - q_matrix(p1, p2, S, h, train)


def _support_points(S, train) -> PointSet:
    if isinstance(S, SupportSet):
        if train is None:
            raise ValueError("a SupportSet needs the training dataset for coordinates")
        return S.points(train)
    if isinstance(S, PointSet):
        return S
    coords = np.atleast_2d(np.asarray(S, dtype=np.float64))
    return PointSet(coords, -1 - np.arange(coords.shape[0], dtype=np.int64))


def _as_points(x) -> PointSet:
    return x if isinstance(x, PointSet) else PointSet(np.asarray(x, dtype=np.float64))


def kl_distance(R: np.ndarray, Rhat: np.ndarray) -> float:
    """Gaussian KL distance 0.5*(tr(R Rhat^-1) - log|R Rhat^-1| - n).

    Both arguments must be symmetric positive definite; zero iff equal.
    Evaluated through Cholesky factors and log-determinants, never
    explicit determinants of matrix products.
    """
    R = np.asarray(R, dtype=np.float64)
    Rhat = np.asarray(Rhat, dtype=np.float64)
    if R.shape != Rhat.shape or R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"shape mismatch: {R.shape} vs {Rhat.shape}")
    n = R.shape[0]
    try:
        l_r = np.linalg.cholesky(R)
        l_hat = np.linalg.cholesky(Rhat)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("kl_distance requires SPD inputs") from exc
    trace_term = float(np.trace(cho_solve((l_hat, True), R)))
    logdet_r = 2.0 * float(np.sum(np.log(np.diag(l_r))))
    logdet_hat = 2.0 * float(np.sum(np.log(np.diag(l_hat))))
    return 0.5 * (trace_term - (logdet_r - logdet_hat) - n)


@dataclass
class BlockMatrix:
    """Grid of dense blocks; block (m, n) has shape row_sizes[m] x col_sizes[n]."""

    blocks: list

    def __post_init__(self):
        rows = [self.blocks[m][0].shape[0] for m in range(len(self.blocks))]
        cols = [b.shape[1] for b in self.blocks[0]]
        for m, row in enumerate(self.blocks):
            for n, blk in enumerate(row):
                if blk.shape != (rows[m], cols[n]):
                    raise ValueError(
                        f"block ({m},{n}) has shape {blk.shape}, expected {(rows[m], cols[n])}"
                    )
        self.row_sizes = rows
        self.col_sizes = cols

    def dense(self) -> np.ndarray:
        return np.block(self.blocks) if self.blocks else np.zeros((0, 0))

    def block(self, m: int, n: int) -> np.ndarray:
        """1-based block access."""
        return self.blocks[m - 1][n - 1]


@dataclass
class CholeskyFactor:
    """Block upper-triangular factor U with U_mn = 0 for m>n or n-m>bandwidth.

    ``diag[m-1]`` holds U_mm and ``band[m-1]`` holds the row
    [U_{m,m+1} .. U_{m,min(m+bandwidth,M)}] as one matrix (zero-width for
    the last block).  U^T U applied to a vector equals the inverse of
    the band-approximated residual applied to that vector.
    """

    diag: list
    band: list
    bandwidth: int

    @property
    def M(self) -> int:
        return len(self.diag)

    @property
    def block_sizes(self):
        return [u.shape[0] for u in self.diag]

    def block(self, m: int, n: int) -> np.ndarray:
        """1-based block (m, n); zero blocks materialized on demand."""
        sizes = self.block_sizes
        if m == n:
            return self.diag[m - 1]
        if m < n <= min(m + self.bandwidth, self.M):
            offset = sum(sizes[k] for k in range(m, n - 1))
            return self.band[m - 1][:, offset : offset + sizes[n - 1]]
        return np.zeros((sizes[m - 1], sizes[n - 1]))

    def dense(self) -> np.ndarray:
        return np.block(
            [[self.block(m, n) for n in range(1, self.M + 1)] for m in range(1, self.M + 1)]
        )

    def apply_utu(self, x: np.ndarray) -> np.ndarray:
        """Compute U^T (U x) blockwise without materializing the dense factor."""
        sizes = self.block_sizes
        starts = np.concatenate([[0], np.cumsum(sizes)])
        x = np.asarray(x, dtype=np.float64)
        ux = np.zeros_like(x, shape=(starts[-1],) + x.shape[1:])
        for m in range(1, self.M + 1):
            lo, hi = starts[m - 1], starts[m]
            seg = self.diag[m - 1] @ x[lo:hi]
            if self.band[m - 1].shape[1]:
                band_hi = starts[min(m + self.bandwidth, self.M)]
                seg = seg + self.band[m - 1] @ x[hi:band_hi]
            ux[lo:hi] = seg
        out = np.zeros_like(ux)
        for m in range(1, self.M + 1):
            lo, hi = starts[m - 1], starts[m]
            out[lo:hi] += self.diag[m - 1].T @ ux[lo:hi]
            if self.band[m - 1].shape[1]:
                band_hi = starts[min(m + self.bandwidth, self.M)]
                out[hi:band_hi] += self.band[m - 1].T @ ux[lo:hi]
        return out


@dataclass
class BlockConditioner:
    """Per-block residual conditioning pieces for block m.

    ``rprime`` is R_{D_m,band} R_{band,band}^{-1}; ``schur`` is the
    residual Schur complement whose inverse is the precision-like block
    used by the local summaries; ``schur_chol`` is its lower factor and
    ``band_chol`` the lower factor of R_{band,band}.  All empty-band
    cases degrade to rprime of width zero.
    """

    m: int
    bandwidth: int
    train_idx: np.ndarray
    band_idx: np.ndarray
    rprime: np.ndarray
    schur: np.ndarray
    schur_chol: np.ndarray
    band_chol: np.ndarray

    def rdot(self) -> np.ndarray:
        """The SPD matrix inverse(schur), symmetrized."""
        inv = chol_solve(self.schur_chol, np.eye(self.schur.shape[0]))
        return 0.5 * (inv + inv.T)


def block_conditioner(
    ops: ResidualOps, part: BlockPartition, bandwidth: int, m: int
) -> BlockConditioner:
    """Residual conditioner of block m on the next ``bandwidth`` blocks."""
    idx_m = part.train_blocks[m - 1]
    idx_b = part.band_after(m, bandwidth)
    pm = ops.train.points(idx_m)
    pb = ops.train.points(idx_b) if idx_b.size else None
    return conditioner_from_pointsets(ops, m, bandwidth, idx_m, idx_b, pm, pb)


def conditioner_from_pointsets(
    ops: ResidualOps,
    m: int,
    bandwidth: int,
    idx_m: np.ndarray,
    idx_b: np.ndarray,
    pm: PointSet,
    pb: PointSet | None,
) -> BlockConditioner:
    """Conditioner math on explicit point sets (worker shards use this)."""
    r_mm = ops.r(pm, pm)
    if idx_b.size:
        r_mb = ops.r(pm, pb)
        r_bb = ops.r(pb, pb)
        try:
            l_bb, _ = cholesky_jittered(0.5 * (r_bb + r_bb.T))
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(f"block {m}: band residual not PD: {exc}") from exc
        rprime = chol_solve(l_bb, r_mb.T).T
        schur = r_mm - rprime @ r_mb.T
    else:
        l_bb = np.zeros((0, 0))
        rprime = np.zeros((idx_m.size, 0))
        schur = r_mm
    schur = 0.5 * (schur + schur.T)
    try:
        l_s, _ = cholesky_jittered(schur)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(f"block {m}: residual Schur not PD: {exc}") from exc
    return BlockConditioner(m, bandwidth, idx_m, idx_b, rprime, schur, l_s, l_bb)


def banded_inverse_cholesky(
    train: Dataset,
    part: BlockPartition,
    support: SupportSet,
    h: Hyperparams,
    bandwidth: int,
) -> CholeskyFactor:
    """Block-sparse upper Cholesky factor of the inverse band-approximated residual.

    U_mm is the upper square root of inverse(schur_m) and the band row is
    -U_mm @ rprime_m; the dense band-approximated residual itself is
    never formed.
    """
    if not 0 <= bandwidth <= part.M - 1:
        raise ValueError(f"bandwidth must be in [0, {part.M - 1}], got {bandwidth}")
    ops = ResidualOps(train, support, h)
    diag, band = [], []
    for m in range(1, part.M + 1):
        cond = block_conditioner(ops, part, bandwidth, m)
        rdot = cond.rdot()
        try:
            u_mm = scipy_cholesky(rdot, lower=False)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - rdot is SPD by construction
            raise NotPositiveDefiniteError(f"block {m}: rdot not PD") from exc
        diag.append(u_mm)
        band.append(-u_mm @ cond.rprime)
    return CholeskyFactor(diag, band, bandwidth)
