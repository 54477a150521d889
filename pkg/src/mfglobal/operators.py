"""Implicit representation of Z = W H^T - alpha * grad and factored products.

Z is never materialized: block products go through the dense factors and one
sparse CSR product, and Frobenius inner products reduce to k-by-k Gram
matrices of the factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SparseResidual
from .kernels import SvdTriplet

# Hard cap on the k-by-n block materialized by project_rows.
PROJECT_ROWS_CAP = 1 << 26


class CapacityError(RuntimeError):
    """A requested dense block exceeds the configured memory budget."""


@dataclass
class FactorPair:
    """Nonconvex iterate (W: m-by-k, H: n-by-k) representing X = W H^T."""

    w: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 2 or self.h.ndim != 2 or self.w.shape[1] != self.h.shape[1]:
            raise ValueError(
                f"inconsistent factor shapes {self.w.shape} / {self.h.shape}"
            )

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def k(self) -> int:
        return self.w.shape[1]

    def dense(self) -> np.ndarray:
        return self.w @ self.h.T

    def frob_sq(self) -> float:
        """||W||_F^2 + ||H||_F^2 (the factorization penalty, without lambda/2)."""
        return float(np.sum(self.w * self.w) + np.sum(self.h * self.h))


def _factor_view(a) -> tuple[np.ndarray, np.ndarray]:
    """(left, right) with a = left @ right.T, for triplets and factor pairs."""
    if isinstance(a, SvdTriplet):
        return a.u * a.sigma, a.v
    if isinstance(a, FactorPair):
        return a.w, a.h
    raise TypeError(f"expected SvdTriplet or FactorPair, got {type(a).__name__}")


def inner_product(a, b) -> float:
    """<A, B> = trace(A^T B) through k_a-by-k_b Gram products of the factors."""
    la, ra = _factor_view(a)
    lb, rb = _factor_view(b)
    if la.shape[0] != lb.shape[0] or ra.shape[0] != rb.shape[0]:
        raise ValueError("operands have mismatched dimensions")
    if la.shape[1] == 0 or lb.shape[1] == 0:
        return 0.0
    return float(np.sum((la.T @ lb) * (ra.T @ rb)))


def frob_dist_sq(a, b) -> float:
    """||A - B||_F^2 via three inner products, clamped at zero."""
    d = inner_product(a, a) - 2.0 * inner_product(a, b) + inner_product(b, b)
    return max(d, 0.0)


class ShiftedOperator:
    """Z = W H^T - alpha * G with G the sparse gradient on Omega.

    Immutable once built; the gradient CSR matrices are cached on the
    SparseResidual so backtracking trials that rescale alpha share them.
    """

    def __init__(self, factors: FactorPair, grad: SparseResidual, alpha: float):
        if grad.m != factors.m or grad.n != factors.n:
            raise ValueError("gradient pattern does not match factor dimensions")
        self.factors = factors
        self.grad = grad
        self.alpha = float(alpha)

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors.m, self.factors.n

    def apply(self, block: np.ndarray) -> np.ndarray:
        """Z @ block for an n-by-p dense block."""
        if block.shape[0] != self.factors.n:
            raise ValueError(f"expected {self.factors.n} rows, got {block.shape[0]}")
        out = self.factors.w @ (self.factors.h.T @ block)
        if self.alpha != 0.0:
            out -= self.alpha * (self.grad.csr @ block)
        return out

    def apply_t(self, block: np.ndarray) -> np.ndarray:
        """Z^T @ block for an m-by-p dense block."""
        if block.shape[0] != self.factors.m:
            raise ValueError(f"expected {self.factors.m} rows, got {block.shape[0]}")
        out = self.factors.h @ (self.factors.w.T @ block)
        if self.alpha != 0.0:
            out -= self.alpha * (self.grad.csr_t @ block)
        return out

    def apply_gram(self, block: np.ndarray) -> np.ndarray:
        """Z (Z^T block) without ever forming Z Z^T."""
        return self.apply(self.apply_t(block))

    def project_rows(self, basis: np.ndarray, cap: int = PROJECT_ROWS_CAP) -> np.ndarray:
        """basis^T @ Z as a dense k-by-n block (basis m-by-k orthonormal)."""
        if basis.shape[0] != self.factors.m:
            raise ValueError(f"expected {self.factors.m} rows, got {basis.shape[0]}")
        k = basis.shape[1]
        if k * self.factors.n > cap:
            raise CapacityError(
                f"projected block {k}x{self.factors.n} exceeds cap {cap}"
            )
        out = (basis.T @ self.factors.w) @ self.factors.h.T
        if self.alpha != 0.0:
            out -= self.alpha * (self.grad.csr_t @ basis).T
        return out

    def dense(self) -> np.ndarray:
        """Materialized Z (oracle/test use only)."""
        return self.factors.dense() - self.alpha * self.grad.csr.toarray()

    def frob_sq(self) -> float:
        """||Z||_F^2 from factored and sparse inner products."""
        from .data import pair_values

        ww = inner_product(self.factors, self.factors)
        gg = float(self.grad.vals @ self.grad.vals)
        xg = float(
            self.grad.vals
            @ pair_values(self.factors.w, self.factors.h, self.grad.rows, self.grad.cols)
        )
        return ww - 2.0 * self.alpha * xg + self.alpha**2 * gg


def dense_operator(z: np.ndarray) -> ShiftedOperator:
    """Wrap a small dense matrix as a ShiftedOperator (tests and oracles)."""
    m, n = z.shape
    empty = SparseResidual(
        m,
        n,
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        np.zeros(m + 1, dtype=np.int64),
        np.zeros(0),
    )
    return ShiftedOperator(FactorPair(z.copy(), np.eye(n)), empty, 0.0)
