"""Dense linear-algebra primitives the solver composes.

Everything here is deterministic: rank decisions come from Householder QR
with explicit column screening, so repeated runs make identical choices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative column-screening threshold for orthonormalization.
ORTH_TOL = 1e-10
# Singular values below this fraction of the largest are treated as zero
# before thresholding (keeps round-off from inflating the rank).
SIGMA_FLOOR = 1e-12
# Width limit for the Gram-matrix route of the short-fat SVD.
GRAM_MAX_K = 64
# Gram eigenvalue ratio below which the Gram route would degrade the right
# singular vectors; fall back to a full SVD there.
GRAM_MIN_RATIO = 1e-6


@dataclass(frozen=True)
class SvdTriplet:
    """Compact SVD ``U diag(sigma) V^T``.

    U is m-by-k and V is n-by-k with orthonormal columns; sigma holds k
    strictly positive values sorted nonincreasing. Rank-zero matrices are
    represented with k = 0 (empty factors).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def rank(self) -> int:
        return int(self.sigma.size)

    @staticmethod
    def zero(m: int, n: int) -> "SvdTriplet":
        return SvdTriplet(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))

    def dense(self) -> np.ndarray:
        """Materialize the full matrix (test scale only)."""
        return (self.u * self.sigma) @ self.v.T

    def nuclear_norm(self) -> float:
        return float(self.sigma.sum())

    def check(self, tol: float = 1e-8) -> None:
        """Raise if the orthonormality/positivity invariants are violated."""
        k = self.rank
        if k == 0:
            return
        err_u = np.linalg.norm(self.u.T @ self.u - np.eye(k))
        err_v = np.linalg.norm(self.v.T @ self.v - np.eye(k))
        if err_u > tol * k or err_v > tol * k:
            raise ValueError(f"factors not orthonormal: {err_u:.2e}, {err_v:.2e}")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        if np.any(np.diff(self.sigma) > 0):
            raise ValueError("sigma must be nonincreasing")


def orthonormalize(b: np.ndarray, tol: float = ORTH_TOL) -> tuple[np.ndarray, int]:
    """Orthonormal basis for range(b) with deterministic rank screening.

    Columns whose component orthogonal to the preceding (kept) columns has
    norm <= tol * ||b||_F are dropped; the screening repeats on the kept set
    until stable so Householder noise directions never survive.

    Returns (q, rank) where q is m-by-rank with orthonormal columns.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ValueError("expected a 2-d array")
    m = b.shape[0]
    if b.shape[1] == 0:
        return np.zeros((m, 0)), 0
    scale = np.linalg.norm(b)
    if scale == 0.0:
        return np.zeros((m, 0)), 0
    cols = b
    while True:
        q, r = np.linalg.qr(cols)
        diag = np.abs(np.diag(r))
        # Columns beyond m are necessarily dependent and carry no diagonal.
        keep = np.zeros(cols.shape[1], dtype=bool)
        keep[: diag.size] = diag > tol * scale
        if keep.all():
            return q[:, : cols.shape[1]], cols.shape[1]
        cols = cols[:, keep]
        if cols.shape[1] == 0:
            return np.zeros((m, 0)), 0


def exact_svd_short_fat(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-accuracy SVD of a short-fat k-by-n matrix (k <= n).

    Returns (u, sigma, v) with u k-by-k orthonormal, sigma nonincreasing and
    nonnegative, v n-by-k orthonormal, and mat = u @ diag(sigma) @ v.T.
    Costs O(k^3 + n k^2): the k-by-k Gram eigendecomposition when it is safe,
    LAPACK bidiagonalization otherwise.
    """
    mat = np.asarray(mat, dtype=np.float64)
    k, n = mat.shape
    if k > n:
        raise ValueError(f"expected short-fat input, got {k}x{n}")
    if k == 0:
        return np.zeros((0, 0)), np.zeros(0), np.zeros((n, 0))
    scale = np.linalg.norm(mat)
    if scale == 0.0:
        return np.eye(k), np.zeros(k), np.eye(n, k)
    if k <= GRAM_MAX_K:
        gram = mat @ mat.T
        w, u_small = np.linalg.eigh(gram)
        w = np.clip(w[::-1], 0.0, None)
        u_small = u_small[:, ::-1]
        if w[-1] > GRAM_MIN_RATIO * w[0]:
            sigma = np.sqrt(w)
            v = mat.T @ (u_small / sigma)
            return u_small, sigma, v
    u, sigma, vt = np.linalg.svd(mat, full_matrices=False)
    return u, sigma, vt.T


def soft_threshold(
    sigma_hat: np.ndarray, beta: float
) -> tuple[np.ndarray, np.ndarray, float | None]:
    """Shrink singular values by beta and drop the ones that hit zero.

    sigma_hat must be nonincreasing and beta >= 0. Values below
    SIGMA_FLOOR * sigma_hat[0] are treated as zero before thresholding, and
    ties (sigma_hat == beta) are truncated so the output stays strictly
    positive.

    Returns (sigma, kept, largest_truncated): the surviving shrunk values,
    the indices they came from, and the largest sigma_hat that was truncated
    (None when nothing was).
    """
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if sigma_hat.size == 0:
        return np.zeros(0), np.zeros(0, dtype=np.intp), None
    floor = SIGMA_FLOOR * sigma_hat[0]
    alive = (sigma_hat - beta > 0.0) & (sigma_hat > floor)
    kept = np.flatnonzero(alive)
    sigma = sigma_hat[kept] - beta
    r = kept.size
    largest_truncated = float(sigma_hat[r]) if r < sigma_hat.size else None
    return sigma, kept, largest_truncated
