"""Rating-data ingestion and quadratic-loss evaluation on the observed set.

The training data lives in a row-compressed triplet layout (entries sorted
by row, then column). Loss and gradient follow f(X) = ||P_Omega(A - X)||_F^2
with no 1/2 factor, so the gradient is 2 * P_Omega(X - A) and its Lipschitz
constant is L = 2.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

from .kernels import SvdTriplet

if TYPE_CHECKING:
    from .operators import FactorPair

LIPSCHITZ = 2.0

# Chunk size (entries) for per-entry factor products; bounds the gather
# temporaries to a few hundred MB at k in the low hundreds.
_EVAL_CHUNK = 1 << 18


class DatasetError(ValueError):
    """Malformed or unusable rating data."""


class EmptyDatasetError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class ObservationSet:
    """Sparse observed ratings A restricted to the index set Omega.

    Immutable after construction; safe to share across threads. Entries are
    sorted by (row, col) with CSR row pointers in ``indptr``, and m <= n is
    guaranteed by the loader (``transposed`` records whether the raw data was
    flipped to achieve that).
    """

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    indptr: np.ndarray
    transposed: bool = False
    row_ids: np.ndarray | None = None
    col_ids: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.vals.size)

    @staticmethod
    def from_coo(
        m: int,
        n: int,
        rows: np.ndarray,
        cols: np.ndarray,
        vals: np.ndarray,
        transposed: bool = False,
        row_ids: np.ndarray | None = None,
        col_ids: np.ndarray | None = None,
    ) -> "ObservationSet":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size != cols.size or rows.size != vals.size:
            raise DatasetError("index/value arrays disagree in length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= m:
                raise DatasetError("row index out of range")
            if cols.min() < 0 or cols.max() >= n:
                raise DatasetError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                i = int(np.flatnonzero(dup)[0])
                raise DatasetError(
                    f"duplicate entry at ({rows[i]}, {cols[i]}); refusing to aggregate"
                )
        indptr = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=m), out=indptr[1:])
        return ObservationSet(m, n, rows, cols, vals, indptr, transposed, row_ids, col_ids)

    @cached_property
    def a_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, self.cols, self.indptr), shape=(self.m, self.n))

    @cached_property
    def pattern_csr(self) -> sp.csr_matrix:
        ones = np.ones_like(self.vals)
        return sp.csr_matrix((ones, self.cols, self.indptr), shape=(self.m, self.n))

    @cached_property
    def a_csr_t(self) -> sp.csr_matrix:
        return self.a_csr.T.tocsr()

    @cached_property
    def pattern_csr_t(self) -> sp.csr_matrix:
        return self.pattern_csr.T.tocsr()


@dataclass
class EvalSplit:
    """Held-out test entries over the same (m, n) grid as the training set."""

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    transposed: bool = False

    @property
    def size(self) -> int:
        return int(self.vals.size)


@dataclass
class SparseResidual:
    """Values on the training pattern Omega; shares index arrays with it."""

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    indptr: np.ndarray
    vals: np.ndarray

    def scaled(self, c: float) -> "SparseResidual":
        return SparseResidual(self.m, self.n, self.rows, self.cols, self.indptr, c * self.vals)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, self.cols, self.indptr), shape=(self.m, self.n))

    @cached_property
    def csr_t(self) -> sp.csr_matrix:
        return self.csr.T.tocsr()

    def norm(self) -> float:
        return float(np.linalg.norm(self.vals))


def _parse_stream(stream, what: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    users, items, ratings = [], [], []
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="replace")
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ParseError(line_no, f"expected 3 or 4 fields, got {len(parts)}")
        try:
            u = int(parts[0])
            i = int(parts[1])
            r = float(parts[2])
        except ValueError as exc:
            raise ParseError(line_no, f"cannot parse '{line}': {exc}") from None
        if u <= 0 or i <= 0:
            raise ParseError(line_no, "user/item ids must be positive integers")
        users.append(u)
        items.append(i)
        ratings.append(r)
    if not users:
        raise EmptyDatasetError(f"no ratings found in {what}")
    return (
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(ratings, dtype=np.float64),
    )


def _open_lines(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb")
    if isinstance(source, bytes):
        return io.BytesIO(source)
    return source  # already an iterable of lines


def load_ratings(
    source, test_source=None, fmt: str = "movielens-tsv"
) -> tuple[ObservationSet, EvalSplit | None]:
    """Load whitespace-separated "user item rating [timestamp]" data.

    User/item ids are compacted to dense 0-based indices over the union of
    the train and test files (the id maps are kept on the ObservationSet so
    predictions can be re-keyed), and dimensions are normalized so m <= n,
    transposing if needed.
    """
    if fmt != "movielens-tsv":
        raise DatasetError(f"unsupported format: {fmt}")
    with _open_lines(source) as fh:
        users, items, ratings = _parse_stream(fh, "training data")
    test_raw = None
    if test_source is not None:
        with _open_lines(test_source) as fh:
            test_raw = _parse_stream(fh, "test data")

    all_users = users if test_raw is None else np.concatenate([users, test_raw[0]])
    all_items = items if test_raw is None else np.concatenate([items, test_raw[1]])
    uniq_users = np.unique(all_users)
    uniq_items = np.unique(all_items)
    u_idx = np.searchsorted(uniq_users, users)
    i_idx = np.searchsorted(uniq_items, items)

    m, n = uniq_users.size, uniq_items.size
    transposed = m > n
    if transposed:
        m, n = n, m
        u_idx, i_idx = i_idx, u_idx
        row_ids, col_ids = uniq_items, uniq_users
    else:
        row_ids, col_ids = uniq_users, uniq_items

    obs = ObservationSet.from_coo(
        m, n, u_idx, i_idx, ratings, transposed, row_ids, col_ids
    )

    split = None
    if test_raw is not None:
        tu = np.searchsorted(uniq_users, test_raw[0])
        ti = np.searchsorted(uniq_items, test_raw[1])
        if transposed:
            tu, ti = ti, tu
        order = np.lexsort((ti, tu))
        split = EvalSplit(m, n, tu[order], ti[order], test_raw[2][order], transposed)
    return obs, split


def pair_values(
    left: np.ndarray, right: np.ndarray, rows: np.ndarray, cols: np.ndarray
) -> np.ndarray:
    """Entrywise values of left @ right.T at the given index pairs."""
    out = np.empty(rows.size)
    for s in range(0, rows.size, _EVAL_CHUNK):
        e = min(s + _EVAL_CHUNK, rows.size)
        out[s:e] = np.einsum(
            "ij,ij->i", left[rows[s:e]], right[cols[s:e]], optimize=False
        )
    return out


def triplet_values(x: SvdTriplet, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if x.rank == 0:
        return np.zeros(rows.size)
    return pair_values(x.u * x.sigma, x.v, rows, cols)


def residual_on_omega(obs: ObservationSet, wf: "FactorPair") -> SparseResidual:
    """r_ij = (W H^T)_ij - A_ij on Omega, via per-entry row inner products."""
    if wf.w.shape[0] != obs.m or wf.h.shape[0] != obs.n:
        raise ValueError(
            f"factor dims ({wf.w.shape[0]}, {wf.h.shape[0]}) do not match data "
            f"({obs.m}, {obs.n})"
        )
    vals = pair_values(wf.w, wf.h, obs.rows, obs.cols) - obs.vals
    return SparseResidual(obs.m, obs.n, obs.rows, obs.cols, obs.indptr, vals)


def residual_on_omega_svd(obs: ObservationSet, x: SvdTriplet) -> SparseResidual:
    """Same as residual_on_omega with X supplied as an SVD triplet."""
    if x.m != obs.m or x.n != obs.n:
        raise ValueError(f"triplet dims ({x.m}, {x.n}) do not match data ({obs.m}, {obs.n})")
    vals = triplet_values(x, obs.rows, obs.cols) - obs.vals
    return SparseResidual(obs.m, obs.n, obs.rows, obs.cols, obs.indptr, vals)


def loss_quad(res: SparseResidual) -> float:
    """f(X) = sum of squared residuals on Omega (no 1/2 factor; L = 2)."""
    return float(res.vals @ res.vals)


def gradient(res: SparseResidual) -> SparseResidual:
    """grad f(X) = 2 * P_Omega(X - A), stored on the training pattern."""
    return res.scaled(LIPSCHITZ)


def rmse(split: EvalSplit, x: SvdTriplet) -> float:
    """sqrt(||P_test(X - A)||_F^2 / |Omega_test|)."""
    if split.size == 0:
        raise ValueError("empty test set")
    diff = triplet_values(x, split.rows, split.cols) - split.vals
    return float(np.sqrt(diff @ diff / split.size))


def rmse_factors(split: EvalSplit, wf: "FactorPair") -> float:
    if split.size == 0:
        raise ValueError("empty test set")
    diff = pair_values(wf.w, wf.h, split.rows, split.cols) - split.vals
    return float(np.sqrt(diff @ diff / split.size))
