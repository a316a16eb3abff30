"""Squared-exponential covariance evaluation and Gram-matrix construction.

The covariance between two inputs x and x' is

    sigma(x, x') = signal_var * exp(-0.5 * sum_i (x_i - x'_i)^2 / ell_i^2)
                   + noise_var * delta(x, x')

where the Kronecker delta fires on *point identity*, not coordinate
equality: two rows of a dataset that happen to share coordinates are
still distinct observations and receive no cross-noise term.  Identity
is carried via integer id labels (see :class:`PointSet`).

Gram construction is the only O(n*m*d) inner loop in the package that is
not already a BLAS/LAPACK call, so it carries a numba ``@njit`` kernel
with a pure-numpy fallback.  The fallback is selected automatically when
numba is unavailable, or explicitly with the environment variable
``LMAGP_NO_NUMBA=1``.  ``benchmarks/gram_benchmark.py`` compares the two
paths.

All math is float64; conditioning of the downstream solves is the
accuracy bottleneck.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Hyperparams",
    "PointSet",
    "kernel_eval",
    "gram",
    "prior_mean",
    "using_numba",
]

try:  # pragma: no cover - exercised only on numba-free installs
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def using_numba() -> bool:
    """True when the jitted Gram kernel is active for this process."""
    return _HAVE_NUMBA and os.environ.get("LMAGP_NO_NUMBA", "") not in ("1", "true", "yes")


@dataclass(frozen=True)
class Hyperparams:
    """Kernel hyperparameters plus the constant prior mean.

    ``lengthscales`` must have one positive entry per input dimension.
    """

    signal_var: float
    noise_var: float
    lengthscales: np.ndarray
    prior_mean: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        object.__setattr__(self, "lengthscales", ls)
        if not np.isfinite(self.signal_var) or self.signal_var <= 0.0:
            raise ValueError(f"signal_var must be positive, got {self.signal_var}")
        if not np.isfinite(self.noise_var) or self.noise_var < 0.0:
            raise ValueError(f"noise_var must be non-negative, got {self.noise_var}")
        if ls.ndim != 1 or ls.size == 0 or not np.all(np.isfinite(ls)) or np.any(ls <= 0.0):
            raise ValueError("lengthscales must be a vector of positive reals")
        if not np.isfinite(self.prior_mean):
            raise ValueError("prior_mean must be finite")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @property
    def prior_var(self) -> float:
        """Prior variance of an observed output: signal_var + noise_var."""
        return self.signal_var + self.noise_var


@dataclass(frozen=True)
class PointSet:
    """A batch of input points with identity labels.

    ``ids`` decide when the noise delta fires in Gram construction: entry
    (i, j) receives ``noise_var`` iff ``a.ids[i] == b.ids[j]`` and the id
    is non-negative.  Observed points (training rows; test points with an
    offset past the training ids) carry non-negative labels; negative
    labels mark latent variables (e.g. support copies), whose covariance
    never includes observation noise.
    """

    coords: np.ndarray
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim == 1:
            c = c.reshape(-1, 1)
        if c.ndim != 2:
            raise ValueError("coords must be a 2-D array of shape (n, d)")
        object.__setattr__(self, "coords", c)
        ids = self.ids
        if ids is None:
            ids = np.arange(c.shape[0], dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (c.shape[0],):
            raise ValueError("ids must be a vector with one label per point")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def take(self, idx) -> "PointSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PointSet(self.coords[idx], self.ids[idx])


def kernel_eval(a, b, h: Hyperparams, same_point: bool = False) -> float:
    """Covariance between two single inputs.

    ``same_point`` marks that ``a`` and ``b`` are the identical
    observation (same dataset index), in which case the noise term is
    added.  Symmetric in (a, b).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    if a.size != h.dim:
        raise ValueError(f"input dimension {a.size} does not match {h.dim} lengthscales")
    z = (a - b) / h.lengthscales
    val = h.signal_var * float(np.exp(-0.5 * np.dot(z, z)))
    if same_point:
        val += h.noise_var
    return val


if _HAVE_NUMBA:

    # The output buffer is allocated by the caller: numba's runtime
    # allocator serializes badly under concurrent worker threads.
    @njit(cache=True, nogil=True)
    def _gram_fill(a, b, inv_ls2, sv, nv, a_ids, b_ids, out):  # pragma: no cover - jitted
        n, d = a.shape
        m = b.shape[0]
        for i in range(n):
            for j in range(m):
                s = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    s += diff * diff * inv_ls2[k]
                v = sv * np.exp(-0.5 * s)
                # noise only between observed points (negative ids are latent)
                if a_ids[i] == b_ids[j] and a_ids[i] >= 0:
                    v += nv
                out[i, j] = v

    def _gram_njit(a, b, inv_ls2, sv, nv, a_ids, b_ids):
        out = np.empty((a.shape[0], b.shape[0]))
        _gram_fill(a, b, inv_ls2, sv, nv, a_ids, b_ids, out)
        return out


# Row-chunked so the (chunk, m, d) difference tensor stays modest.
_NUMPY_CHUNK_ELEMS = 1 << 24


def _gram_numpy(a, b, inv_ls2, sv, nv, a_ids, b_ids):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    chunk = max(1, _NUMPY_CHUNK_ELEMS // max(1, m * d))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        diff = a[start:stop, None, :] - b[None, :, :]
        out[start:stop] = sv * np.exp(-0.5 * np.einsum("ijk,k->ij", diff * diff, inv_ls2))
    if nv != 0.0:
        fire = (a_ids[:, None] == b_ids[None, :]) & (a_ids[:, None] >= 0)
        out += nv * fire
    return out


def _resolve_ids(A, B):
    """Identity labels for a gram call.

    PointSets carry their own ids.  Plain arrays are self-identified only
    when the very same object is passed on both sides (a self-Gram);
    otherwise they receive labels disjoint from everything, so no noise
    delta fires.
    """
    same_object = A is B
    ps_a = A if isinstance(A, PointSet) else None
    ps_b = B if isinstance(B, PointSet) else None
    ca = ps_a.coords if ps_a is not None else np.atleast_2d(np.asarray(A, dtype=np.float64))
    cb = ps_b.coords if ps_b is not None else np.atleast_2d(np.asarray(B, dtype=np.float64))
    na, nb = ca.shape[0], cb.shape[0]
    if ps_a is not None:
        ia = ps_a.ids
    elif same_object:
        ia = np.arange(na, dtype=np.int64)
    else:
        ia = -1 - np.arange(na, dtype=np.int64)
    if ps_b is not None:
        ib = ps_b.ids
    elif same_object:
        ib = ia
    else:
        ib = -1 - na - np.arange(nb, dtype=np.int64)
    return ca, cb, ia, ib


def gram(A, B, h: Hyperparams) -> np.ndarray:
    """Covariance matrix between two point sets, entry (i,j) = sigma(A_i, B_j).

    Accepts :class:`PointSet` (identity-aware) or plain coordinate
    arrays.  Empty inputs yield an empty matrix.
    """
    ca, cb, ia, ib = _resolve_ids(A, B)
    if ca.shape[1] != cb.shape[1]:
        raise ValueError(f"dimension mismatch: {ca.shape[1]} vs {cb.shape[1]}")
    if ca.shape[1] != h.dim:
        raise ValueError(
            f"input dimension {ca.shape[1]} does not match {h.dim} lengthscales"
        )
    if ca.shape[0] == 0 or cb.shape[0] == 0:
        return np.zeros((ca.shape[0], cb.shape[0]))
    inv_ls2 = 1.0 / (h.lengthscales * h.lengthscales)
    args = (
        np.ascontiguousarray(ca),
        np.ascontiguousarray(cb),
        inv_ls2,
        float(h.signal_var),
        float(h.noise_var),
        ia,
        ib,
    )
    if using_numba():
        return _gram_njit(*args)
    return _gram_numpy(*args)


def gram_numpy_path(A, B, h: Hyperparams) -> np.ndarray:
    """Force the pure-numpy Gram path (used by tests and the benchmark)."""
    ca, cb, ia, ib = _resolve_ids(A, B)
    if ca.shape[0] == 0 or cb.shape[0] == 0:
        return np.zeros((ca.shape[0], cb.shape[0]))
    inv_ls2 = 1.0 / (h.lengthscales * h.lengthscales)
    return _gram_numpy(ca, cb, inv_ls2, float(h.signal_var), float(h.noise_var), ia, ib)


def prior_mean(n: int, h: Hyperparams) -> np.ndarray:
    """Constant prior mean vector of length n."""
    return np.full(n, float(h.prior_mean))
