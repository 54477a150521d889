"""Dense brute-force references for tests and the compare command.

Everything here materializes full matrices, so inputs are capped at
ORACLE_MAX_ENTRIES entries; these functions exist for correctness, not
speed.
"""

from __future__ import annotations

import numpy as np

from .data import LIPSCHITZ, ObservationSet
from .kernels import SIGMA_FLOOR, SvdTriplet, soft_threshold

ORACLE_MAX_ENTRIES = 10**6


class OracleCapacityError(RuntimeError):
    pass


def _check_cap(m: int, n: int) -> None:
    if m * n > ORACLE_MAX_ENTRIES:
        raise OracleCapacityError(
            f"dense oracle refused {m}x{n} ({m * n} entries > {ORACLE_MAX_ENTRIES})"
        )


def dense_from_obs(obs: ObservationSet) -> tuple[np.ndarray, np.ndarray]:
    """(A, mask) as dense arrays."""
    _check_cap(obs.m, obs.n)
    a = np.zeros((obs.m, obs.n))
    mask = np.zeros((obs.m, obs.n), dtype=bool)
    a[obs.rows, obs.cols] = obs.vals
    mask[obs.rows, obs.cols] = True
    return a, mask


def dense_loss(obs: ObservationSet, x: np.ndarray) -> float:
    a, mask = dense_from_obs(obs)
    diff = np.where(mask, x - a, 0.0)
    return float(np.sum(diff * diff))


def dense_grad(obs: ObservationSet, x: np.ndarray) -> np.ndarray:
    a, mask = dense_from_obs(obs)
    return LIPSCHITZ * np.where(mask, x - a, 0.0)


def dense_objective(obs: ObservationSet, x: np.ndarray, lam: float) -> float:
    return dense_loss(obs, x) + lam * float(
        np.linalg.svd(x, compute_uv=False).sum()
    )


def dense_prox_exact(z: np.ndarray, threshold: float) -> SvdTriplet:
    """Exact prox of threshold * nuclear norm at z: SVD then shrink."""
    _check_cap(*z.shape)
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    sigma, kept, _ = soft_threshold(s, threshold)
    return SvdTriplet(
        np.ascontiguousarray(u[:, kept]), sigma, np.ascontiguousarray(vt[kept].T)
    )


def dense_pg_reference(
    obs: ObservationSet,
    lam: float,
    iters: int,
    step: float = 1.0 / LIPSCHITZ,
    f_history: list | None = None,
) -> tuple[np.ndarray, float]:
    """Exact proximal gradient with a fixed step, run to ``iters``.

    Returns the final dense iterate and its objective; the trajectory is
    monotone nonincreasing for step <= 1/L.
    """
    _check_cap(obs.m, obs.n)
    a, mask = dense_from_obs(obs)
    x = np.zeros((obs.m, obs.n))
    f_val = dense_objective(obs, x, lam)
    if f_history is not None:
        f_history.append(f_val)
    for _ in range(iters):
        grad = LIPSCHITZ * np.where(mask, x - a, 0.0)
        x = dense_prox_exact(x - step * grad, step * lam).dense()
        if f_history is not None:
            f_val = dense_objective(obs, x, lam)
            f_history.append(f_val)
    f_val = dense_objective(obs, x, lam)
    return x, f_val


def dense_eig_topk(s: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of a symmetric matrix, values nonincreasing."""
    _check_cap(*s.shape)
    w, v = np.linalg.eigh(s)
    return w[::-1][:k].copy(), v[:, ::-1][:, :k].copy()


def min_norm_subgradient(x: np.ndarray, grad: np.ndarray, lam: float) -> float:
    """Exact min-norm element of grad + lam * (subdifferential of ||.||_*) at x.

    The subgradient set at x = U S V^T is {U V^T + W : U^T W = 0, W V = 0,
    ||W||_2 <= 1}; the minimizer projects -G/lam onto it, which amounts to
    clipping the singular values of G's component in the (U, V)-complement.
    """
    _check_cap(*x.shape)
    if lam == 0.0:
        return float(np.linalg.norm(grad))
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    if s.size and s[0] > 0.0:
        r = int(np.count_nonzero(s > SIGMA_FLOOR * s[0]))
    else:
        r = 0
    ur, vr = u[:, :r], vt[:r].T
    g = grad + lam * (ur @ vr.T)
    gu = ur.T @ g
    g_perp = g - ur @ gu
    gv = g_perp @ vr
    rest_sq = float(np.sum(gu * gu) + np.sum(gv * gv))
    gc = g_perp - gv @ vr.T
    sc = np.linalg.svd(gc, compute_uv=False)
    excess = np.clip(sc - lam, 0.0, None)
    return float(np.sqrt(rest_sq + excess @ excess))
