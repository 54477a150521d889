"""Warm-started top-k eigenpair solvers for the PSD operator Z Z^T.

Both methods apply the operator only through block products and extract
Ritz pairs by dense Rayleigh-Ritz on the (tiny) projected problem. The
limited-memory method enriches the power iteration's search space with the
current block and up to M-1 orthogonalized previous blocks; with M = 0 it
reduces to the power method's iteration map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import orthonormalize

# Residuals cannot drop below the round-off floor relative to ||Z Z^T||, so
# sweeps stop there; anything above it runs until residual_tol or max_iters
# (block residuals legitimately rise during target-swap transients, so no
# progress-based stagnation rule is safe).
_FLOOR = 100 * np.finfo(np.float64).eps


@dataclass
class EigConfig:
    memory: int = 3
    max_iters: int = 30
    residual_tol: float = 1e-8
    method: str = "lm-krylov"  # or "power"

    def __post_init__(self):
        if self.memory < 0:
            raise ValueError("memory must be >= 0")
        if self.residual_tol <= 0:
            raise ValueError("residual_tol must be positive")
        if self.method not in ("power", "lm-krylov"):
            raise ValueError(f"unknown method: {self.method}")


@dataclass
class EigResult:
    """Orthonormal basis with Ritz values (these are sigma-bar squared)."""

    basis: np.ndarray
    eigvals: np.ndarray
    residuals: np.ndarray
    iters_used: int
    converged: bool
    history: list = field(default_factory=list)  # per-sweep Ritz values


def _complete_basis(q: np.ndarray, k: int) -> np.ndarray:
    """Pad q with deterministic orthonormal columns until it has k of them."""
    m = q.shape[0]
    j = 0
    cols = [q]
    width = q.shape[1]
    while width < k and j < m:
        e = np.zeros(m)
        e[j] = 1.0
        for block in cols:
            e -= block @ (block.T @ e)
        nrm = np.linalg.norm(e)
        if nrm > 1e-8:
            cols.append((e / nrm)[:, None])
            width += 1
        j += 1
    if width < k:
        raise ValueError(f"cannot build a rank-{k} basis in dimension {m}")
    return np.hstack(cols) if len(cols) > 1 else q


def _prepare_block(r0: np.ndarray, k: int) -> np.ndarray:
    q, rank = orthonormalize(r0)
    if rank < k:
        q = _complete_basis(q, k)
    return q


def _ritz(op, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rayleigh-Ritz on span(q): returns (vectors, values, S@vectors, residuals)."""
    sq = op.apply_gram(q)
    t = q.T @ sq
    t = 0.5 * (t + t.T)
    w, p = np.linalg.eigh(t)
    w = np.clip(w[::-1], 0.0, None)
    p = p[:, ::-1]
    vecs = q @ p
    svecs = sq @ p
    res = np.linalg.norm(svecs - vecs * w, axis=0)
    return vecs, w, svecs, res


def power_topk(op, r0: np.ndarray, cfg: EigConfig) -> EigResult:
    """Block power iteration u <- orth(Z Z^T u) with per-sweep Ritz extraction.

    Terminates when every pair's residual ||Z Z^T u - w u|| is at or below
    cfg.residual_tol, when max_iters sweeps are spent, or when the residual
    stops improving (round-off floor).
    """
    m = op.shape[0]
    k = r0.shape[1]
    if k > m:
        raise ValueError(f"requested k={k} exceeds dimension m={m}")
    if k == 0:
        return EigResult(np.zeros((m, 0)), np.zeros(0), np.zeros(0), 0, True)
    u = _prepare_block(r0, k)
    y = op.apply_gram(u)
    history: list = []
    basis, w, res = u, np.zeros(k), np.full(k, np.inf)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        q, rank = orthonormalize(y)
        if rank < k:
            q = _complete_basis(q, k)
        basis, w, svecs, res = _ritz(op, q)
        history.append(w.copy())
        rmax = float(res.max())
        if rmax <= cfg.residual_tol:
            converged = True
            break
        if rmax <= _FLOOR * max(w[0], 1e-300):
            break
        y = svecs  # equals (Z Z^T) @ basis: next power iterate, no extra product
    return EigResult(basis, w, res, it, converged, history)


def lmkrylov_topk(op, r0: np.ndarray, cfg: EigConfig) -> EigResult:
    """Limited-memory Krylov iteration.

    Each sweep performs Rayleigh-Ritz on span{Z Z^T u, u, h_1, ..., h_{M-1}}
    where the h_j are the orthogonalized remainders of older blocks; the top-k
    Ritz pairs become the next block. With memory = 0 the space is just
    orth(Z Z^T u), i.e. the power method's map.
    """
    m = op.shape[0]
    k = r0.shape[1]
    if k > m:
        raise ValueError(f"requested k={k} exceeds dimension m={m}")
    if k == 0:
        return EigResult(np.zeros((m, 0)), np.zeros(0), np.zeros(0), 0, True)
    u = _prepare_block(r0, k)
    hist: list[np.ndarray] = []
    history: list = []
    basis, w, res = u, np.zeros(k), np.full(k, np.inf)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        p_blk = op.apply_gram(u)
        if cfg.memory == 0:
            cand = p_blk
        else:
            cand = np.hstack([p_blk, u] + hist)
        q, rank = orthonormalize(cand)
        if rank < k:
            q = _complete_basis(q, k)
        ritz_vecs, w_all, svecs, res_all = _ritz(op, q)
        basis = ritz_vecs[:, :k]
        w = w_all[:k]
        res = res_all[:k]
        history.append(w.copy())
        rmax = float(res.max())
        done = rmax <= cfg.residual_tol
        stalled = not done and rmax <= _FLOOR * max(w[0], 1e-300)
        if cfg.memory >= 2 and not (done or stalled):
            comp = u - basis @ (basis.T @ u)
            cq, crank = orthonormalize(comp)
            if crank:
                hist = [cq] + hist
            hist = hist[: cfg.memory - 1]
        u = basis
        if done:
            converged = True
            break
        if stalled:
            break
    return EigResult(basis, w, res, it, converged, history)


def residuals(op, basis: np.ndarray, eigvals: np.ndarray) -> np.ndarray:
    """r_i = ||Z Z^T u_i - w_i u_i||_2 for each column of the basis."""
    if basis.shape[1] == 0:
        return np.zeros(0)
    s = op.apply_gram(basis)
    return np.linalg.norm(s - basis * np.asarray(eigvals), axis=0)


def solve_topk(op, r0: np.ndarray, cfg: EigConfig) -> EigResult:
    if cfg.method == "power":
        return power_topk(op, r0, cfg)
    return lmkrylov_topk(op, r0, cfg)
