"""Nonconvex factorization phase: optimal factors of an SVD iterate and
block-coordinate descent with exact per-row minimization of the quadratic
loss plus Frobenius penalties.
"""

from __future__ import annotations

import numpy as np

from .data import ObservationSet, loss_quad, residual_on_omega
from .kernels import SIGMA_FLOOR, SvdTriplet
from .operators import FactorPair

# Relative slack for the per-epoch monotonicity guard.
_GUARD_SLACK = 1e-9

# Bound (in floats) on the pair-product block built per SpMM call.
_PAIR_CHUNK = 1 << 25


class MfPhaseError(RuntimeError):
    """The BCD sweep increased the objective: indicates a kernel bug."""


def factors_from_svd(x: SvdTriplet) -> FactorPair:
    """Split X = U diag(s) V^T into W = U sqrt(s), H = V sqrt(s).

    These factors attain the variational form of the nuclear norm, so
    (||W||_F^2 + ||H||_F^2) / 2 equals sum(s).
    """
    root = np.sqrt(x.sigma)
    return FactorPair(x.u * root, x.v * root)


def svd_from_factors(wf: FactorPair) -> SvdTriplet:
    """Compact SVD of W H^T via QR of the factors and a k-by-k SVD."""
    if wf.k == 0:
        return SvdTriplet.zero(wf.m, wf.n)
    qw, rw = np.linalg.qr(wf.w)
    qh, rh = np.linalg.qr(wf.h)
    u_mid, s, vt_mid = np.linalg.svd(rw @ rh.T)
    if s.size == 0 or s[0] == 0.0:
        return SvdTriplet.zero(wf.m, wf.n)
    kept = s > SIGMA_FLOOR * s[0]
    return SvdTriplet(qw @ u_mid[:, kept], s[kept], qh @ vt_mid.T[:, kept])


def mf_objective(obs: ObservationSet, wf: FactorPair, lam: float) -> float:
    """f(W H^T) + (lam/2)(||W||_F^2 + ||H||_F^2)."""
    return loss_quad(residual_on_omega(obs, wf)) + 0.5 * lam * wf.frob_sq()


def _half_sweep(a_csr, pattern_csr, other: np.ndarray, lam: float) -> np.ndarray:
    """Exact row minimizers: solve (lam I + 2 sum h h^T) w = 2 sum A h per row.

    The per-row normal matrices are assembled with one sparse-times-dense
    product over the k(k+1)/2 symmetric pair columns, then solved in a single
    batched factorization.
    """
    m = a_csr.shape[0]
    k = other.shape[1]
    iu, ju = np.triu_indices(k)
    npairs = iu.size
    g_tri = np.empty((m, npairs))
    step = max(1, _PAIR_CHUNK // max(1, other.shape[0]))
    for s in range(0, npairs, step):
        e = min(npairs, s + step)
        g_tri[:, s:e] = pattern_csr @ (other[:, iu[s:e]] * other[:, ju[s:e]])
    normal = np.empty((m, k, k))
    normal[:, iu, ju] = g_tri
    normal[:, ju, iu] = g_tri
    normal *= 2.0
    normal[:, np.arange(k), np.arange(k)] += lam
    rhs = 2.0 * (a_csr @ other)
    return np.linalg.solve(normal, rhs[:, :, None])[:, :, 0]


def bcd_epoch(obs: ObservationSet, wf: FactorPair, lam: float) -> FactorPair:
    """One sweep: all rows of W (given H), then all rows of H (given new W).

    Each row update is the exact minimizer of its restricted quadratic, so
    the objective is nonincreasing after every update; lam > 0 keeps the
    normal matrices positive definite.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if wf.w.shape[0] != obs.m or wf.h.shape[0] != obs.n:
        raise ValueError("factor dimensions do not match the data")
    if wf.k == 0:
        return wf
    w_new = _half_sweep(obs.a_csr, obs.pattern_csr, wf.h, lam)
    h_new = _half_sweep(obs.a_csr_t, obs.pattern_csr_t, w_new, lam)
    return FactorPair(w_new, h_new)


def mf_phase(
    obs: ObservationSet, start: FactorPair, lam: float, epochs: int
) -> FactorPair:
    """Run ``epochs`` BCD sweeps from ``start``, asserting monotone descent."""
    wf = start
    if epochs <= 0:
        return wf
    prev = mf_objective(obs, wf, lam)
    for _ in range(epochs):
        wf = bcd_epoch(obs, wf, lam)
        cur = mf_objective(obs, wf, lam)
        if cur > prev + _GUARD_SLACK * (1.0 + abs(prev)):
            raise MfPhaseError(
                f"BCD sweep increased the objective: {prev!r} -> {cur!r}"
            )
        prev = cur
    return wf
