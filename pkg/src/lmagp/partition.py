"""Deterministic blocking of inputs and random support-set selection.

Training inputs are projected onto their first principal axis, sorted,
and cut into M contiguous runs of near-equal size.  Block order along
the axis is the order the Markov band sees, so adjacent block indices
are spatially adjacent.  Test points go to the block with the nearest
training centroid (Euclidean, ties to the lower index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .kernel import PointSet

__all__ = ["BlockPartition", "SupportSet", "partition_inputs", "select_support"]


@dataclass(frozen=True)
class BlockPartition:
    """Ordered disjoint index blocks for train (D_1..D_M) and test (U_1..U_M)."""

    train_blocks: tuple
    test_blocks: tuple
    centroids: np.ndarray

    @property
    def M(self) -> int:
        return len(self.train_blocks)

    def block_sizes(self):
        return [len(b) for b in self.train_blocks]

    def band_after(self, m: int, bandwidth: int) -> np.ndarray:
        """Concatenated train indices of blocks m+1 .. min(m+bandwidth, M).

        Empty for the last block; ascending block order is preserved.
        ``m`` is 1-based, matching the block numbering used throughout.
        """
        hi = min(m + bandwidth, self.M)
        parts = [self.train_blocks[k - 1] for k in range(m + 1, hi + 1)]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)

    def train_perm(self) -> np.ndarray:
        """Training indices concatenated in block order."""
        return np.concatenate(self.train_blocks)

    def test_perm(self) -> np.ndarray:
        parts = [b for b in self.test_blocks if len(b)]
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(parts)


@dataclass(frozen=True)
class SupportSet:
    """Training row indices inducing the low-rank projection."""

    indices: np.ndarray
    seed: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size < 1:
            raise ValueError("support set must contain at least one point")
        if np.unique(idx).size != idx.size:
            raise ValueError("support indices must be distinct")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.size

    def points(self, train: Dataset) -> PointSet:
        # Support variables are the latent (noise-free) process at the
        # selected inputs.  Their ids live in a negative space, so no
        # observation-noise delta ever fires against a data point; the
        # support self-Gram is built noise-free by the consumers.
        return PointSet(train.X[self.indices], -1 - np.arange(self.indices.size, dtype=np.int64))


def _principal_axis(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc
    w, v = np.linalg.eigh(cov)
    axis = v[:, -1]
    # Fix the eigenvector sign so the split is reproducible across runs.
    j = int(np.argmax(np.abs(axis)))
    if axis[j] < 0:
        axis = -axis
    return axis


def partition_inputs(train: Dataset, test, M: int, seed: int = 0) -> BlockPartition:
    """Split train rows into M ordered blocks and assign test rows to them.

    Deterministic given (inputs, M, seed); the axis-sort scheme consumes
    no randomness, the seed is accepted for interface stability.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if train.n < M:
        raise ValueError(f"cannot split {train.n} points into {M} blocks")
    X = train.X
    axis = _principal_axis(X)
    proj = X @ axis
    order = np.argsort(proj, kind="stable")
    train_blocks = tuple(np.sort(b).astype(np.int64) for b in np.array_split(order, M))
    centroids = np.stack([X[b].mean(axis=0) for b in train_blocks])

    if test is None:
        test_X = np.empty((0, train.d))
    elif isinstance(test, Dataset):
        test_X = test.X
    else:
        test_X = np.asarray(test, dtype=np.float64)
        if test_X.ndim == 1:
            test_X = test_X.reshape(-1, 1)
    test_blocks = [[] for _ in range(M)]
    if test_X.shape[0]:
        d2 = ((test_X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        for i, m in enumerate(assign):
            test_blocks[m].append(i)
    test_blocks = tuple(np.asarray(b, dtype=np.int64) for b in test_blocks)
    return BlockPartition(train_blocks, test_blocks, centroids)


def select_support(train: Dataset, size: int, seed: int = 0) -> SupportSet:
    """Uniform sample of ``size`` training rows without replacement."""
    if not 1 <= size <= train.n:
        raise ValueError(f"support size {size} out of range [1, {train.n}]")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(train.n, size=size, replace=False))
    return SupportSet(idx.astype(np.int64), seed)
