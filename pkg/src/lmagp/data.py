"""Dataset container and CSV input/output.

CSV layout: a header row ``x1,...,xd`` optionally followed by ``y``,
then one numeric row per point.  NaN and infinities are rejected.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .kernel import PointSet

__all__ = ["Dataset", "load_csv", "write_csv", "write_predictions_csv"]


@dataclass
class Dataset:
    """Training or test data: inputs X (n, d) and optional outputs y (n,)."""

    X: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise ValueError("X must be 2-D (n, d)")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        self.X = X
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64).ravel()
            if y.shape[0] != X.shape[0]:
                raise ValueError("y length does not match number of rows in X")
            if not np.all(np.isfinite(y)):
                raise ValueError("y contains non-finite values")
            self.y = y

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def points(self, idx=None, id_offset: int = 0) -> PointSet:
        """Identity-labelled view of the rows ``idx`` (all rows if None).

        ``id_offset`` shifts the identity labels; test sets use an offset
        past the training ids so deltas never fire across sets.
        """
        if idx is None:
            idx = np.arange(self.n, dtype=np.int64)
        idx = np.asarray(idx, dtype=np.int64)
        return PointSet(self.X[idx], idx + id_offset)


def _parse_header(header: list[str], path: str):
    cols = [c.strip() for c in header]
    has_y = bool(cols) and cols[-1] == "y"
    xcols = cols[:-1] if has_y else cols
    if not xcols or any(c != f"x{i + 1}" for i, c in enumerate(xcols)):
        raise ValueError(f"{path}: expected header 'x1,...,xd[,y]', got {header!r}")
    return len(xcols), has_y


def load_csv(path) -> Dataset:
    """Load a dataset, raising with the offending line number on bad rows."""
    path = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        d, has_y = _parse_header(header, path)
        width = d + (1 if has_y else 0)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise ValueError(
                    f"{path}: line {lineno}: expected {width} columns, got {len(row)}"
                )
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric cell") from None
            if not all(np.isfinite(vals)):
                raise ValueError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, :d], arr[:, d] if has_y else None)


def write_csv(path, data: Dataset) -> None:
    header = [f"x{i + 1}" for i in range(data.d)]
    cols = [data.X]
    if data.y is not None:
        header.append("y")
        cols.append(data.y.reshape(-1, 1))
    _write_rows(path, header, np.hstack(cols))


def write_predictions_csv(path, X: np.ndarray, mean: np.ndarray, var: np.ndarray) -> None:
    """Prediction rows ``x1..xd,mean,var`` aligned to the test input order."""
    header = [f"x{i + 1}" for i in range(X.shape[1])] + ["mean", "var"]
    _write_rows(path, header, np.column_stack([X, mean, var]))


def _write_rows(path, header, arr) -> None:
    with open(str(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.atleast_2d(arr):
            writer.writerow([repr(float(v)) for v in row])
