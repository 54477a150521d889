"""One convex lifting step on the nuclear-norm-regularized problem.

Pieces: BB stepsize initialization with clamping, a backtracking loop that
builds the shifted operator Z = X~ - alpha * grad, a warm-started approximate
eigendecomposition of Z Z^T, the exact short-fat SVD + soft-threshold that
finishes the proximal step, an upper bound on the min-norm subgradient of the
step's model (the inexactness certificate), and the warm-start basis policy
that keeps the eigensolver's rank one above the iterate's once it stabilizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ObservationSet, SparseResidual, pair_values, triplet_values
from .eigensolver import EigConfig, EigResult, solve_topk
from .kernels import SvdTriplet, exact_svd_short_fat, orthonormalize, soft_threshold
from .operators import FactorPair, ShiftedOperator, frob_dist_sq

# Dense certification is exact and auto-selected up to this many entries.
EXACT_CERT_MAX_ENTRIES = 10**6
# Deflated power iterations per singular-value estimate in estimated mode.
CERT_POWER_ITERS = 5
CERT_MAX_VECTORS = 10
# Extra backtracking headroom past ceil(log_beta(alpha_min / alpha_max)).
_BACKTRACK_SAFETY = 8
# Round-off slack for the backtracking test (relative to its own terms).
_EQ5_SLACK = 1e-12


class BacktrackingError(RuntimeError):
    """Backtracking exceeded its finite-termination bound."""


@dataclass
class StepParams:
    """lambda and the stepsize/backtracking constants."""

    lam: float
    alpha_min: float = 1e-6
    alpha_max: float = 100.0
    beta: float = 0.5
    delta: float = 0.99
    bb_reciprocal: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not (0 < self.alpha_min <= self.alpha_max):
            raise ValueError("need 0 < alpha_min <= alpha_max")
        if not (0 < self.beta < 1) or not (0 < self.delta < 1):
            raise ValueError("beta and delta must lie in (0, 1)")


@dataclass
class WarmStartState:
    """Carries the truncated-direction memory between lifting steps.

    ``retained`` is the singular vector of the largest truncated singular
    value from the latest step where truncation happened; ``psi`` bounds the
    random perturbation added to it and decays geometrically at every update.
    """

    rng: np.random.Generator
    retained: np.ndarray | None = None
    psi: float = 0.0
    psi_decay: float = 0.5
    prev_rank: int = -1
    pending_rank: int = -1
    last_trunc_count: int = 1 << 30


@dataclass
class LiftOutcome:
    x_next: SvdTriplet
    alpha_used: float
    backtracks: int
    eps_achieved: float
    eps_warning: bool
    largest_truncated: float | None
    truncated_vector: np.ndarray | None
    trunc_count: int
    k_t: int
    f_base: float
    f_next: float
    grad_inner: float
    dist_sq: float
    eig_sweeps: int
    eig_converged: bool
    eig_residual: float


def bb_stepsize(
    x_t: SvdTriplet,
    x_prev: SvdTriplet,
    grad_t: SparseResidual,
    grad_prev: SparseResidual,
    p: StepParams,
    fallback: float,
) -> float:
    """Clamped BB initialization from successive iterates and gradients.

    The printed form clamps <dX, dG> / ||dX||_F^2 itself; with
    p.bb_reciprocal the reciprocal ratio (the usual spectral stepsize) is
    clamped instead. The gradient difference lives on Omega, so the numerator
    reduces to a sparse sum; a zero iterate difference returns ``fallback``
    (the previously accepted stepsize).
    """
    diff = grad_t.vals - grad_prev.vals
    # For the quadratic loss, <dX, dG> = <dG/2, dG> on Omega.
    num = 0.5 * float(diff @ diff)
    den = frob_dist_sq(x_t, x_prev)
    if den <= 0.0:
        return fallback
    if p.bb_reciprocal:
        if num <= 0.0:
            return p.alpha_max
        ratio = den / num
    else:
        ratio = num / den
    return float(min(max(ratio, p.alpha_min), p.alpha_max))


def build_warmstart(
    u_basis: np.ndarray,
    w_mf: np.ndarray,
    ws: WarmStartState,
    cur_rank: int | None = None,
) -> np.ndarray:
    """Warm-start basis R_t for the approximate eigendecomposition.

    R_hat = orth([U, W]). When the rank-growth trigger holds (rank unchanged
    since the previous iterate and at most one singular value truncated in
    the last step), the retained truncated direction is projected onto
    ker(R_hat^T), perturbed by a random xi in ker([R_hat, u_t]^T) with
    ||xi|| <= psi, and appended. Once the rank has stabilized the basis is
    capped at cur_rank + 1 columns: the current singular directions plus one
    probe.
    """
    m = u_basis.shape[0]
    if w_mf.shape[0] != m:
        raise ValueError("basis and factor block have different row counts")
    if cur_rank is None:
        cur_rank = u_basis.shape[1]
    r_hat, _ = orthonormalize(np.hstack([u_basis, w_mf]))
    trigger = cur_rank == ws.prev_rank and ws.last_trunc_count <= 1
    r = r_hat
    appended = False
    if trigger:
        u = ws.retained if ws.retained is not None else ws.rng.standard_normal(m)
        u_t = u - r_hat @ (r_hat.T @ u)
        g = ws.rng.standard_normal(m)
        g -= r_hat @ (r_hat.T @ g)
        nu = np.linalg.norm(u_t)
        if nu > 0.0:
            g -= (u_t / nu) * float((u_t / nu) @ g)
        gn = np.linalg.norm(g)
        xi = (ws.psi / gn) * g if gn > 0.0 else np.zeros(m)
        col = (u_t + xi)[:, None]
        r, rank = orthonormalize(np.hstack([r_hat, col]))
        appended = rank > r_hat.shape[1]
    if cur_rank == ws.prev_rank and r.shape[1] > cur_rank + 1:
        probe = r[:, -1:] if appended else r[:, cur_rank : cur_rank + 1]
        r = np.hstack([r[:, :cur_rank], probe])
    ws.pending_rank = cur_rank
    return r


def update_warmstart_after_step(
    ws: WarmStartState, outcome: LiftOutcome, truncated_vector: np.ndarray | None
) -> WarmStartState:
    """Record the latest truncation and decay the perturbation bound."""
    if truncated_vector is not None:
        ws.retained = np.array(truncated_vector, copy=True)
    ws.last_trunc_count = outcome.trunc_count
    ws.prev_rank = ws.pending_rank
    ws.psi *= ws.psi_decay
    return ws


def _low_rank_part(
    x_next: SvdTriplet, x_tilde: FactorPair, alpha: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """(L, R) with (X_next - X~)/alpha + lam U V^T = L @ R.T."""
    scale = x_next.sigma / alpha + lam
    left = np.hstack([x_next.u * scale, -x_tilde.w / alpha])
    right = np.hstack([x_next.v, x_tilde.h])
    return left, right


def certify_epsilon(
    x_next: SvdTriplet,
    x_tilde: FactorPair,
    grad: SparseResidual,
    alpha: float,
    lam: float,
    mode: str = "auto",
    sigma_hat: np.ndarray | None = None,
) -> float:
    """Upper bound on the min-norm subgradient of the step model at x_next.

    With G = grad f(X~) + (X_next - X~)/alpha + lam U V^T, the minimizing
    subgradient adds lam W* where W* projects -G/lam onto the admissible set
    {U^T W = 0, W V = 0, ||W||_2 <= 1}: only the part of G in the (U, V)
    complement with singular values above lam survives. exact-dense mode
    computes this in full; estimated mode keeps the row/column-space term
    exact, estimates the complement's spectral excess with a few deflated
    power iterations, and floors the result with the spectral-residual bound
    ||Z - Zhat||_F / alpha (valid because x_next is the exact prox of Zhat).
    """
    m, n = x_tilde.m, x_tilde.n
    if mode == "auto":
        mode = "exact-dense" if m * n <= EXACT_CERT_MAX_ENTRIES else "estimated"
    u, v = x_next.u, x_next.v
    if mode == "exact-dense":
        g = np.zeros((m, n))
        g[grad.rows, grad.cols] = grad.vals
        g += (x_next.dense() - x_tilde.dense()) / alpha
        if x_next.rank:
            g += lam * (u @ v.T)
        # row/column-space component computed directly (no cancellation)
        gu = u.T @ g
        g_perp = g - u @ gu
        gv = g_perp @ v
        rest_sq = float(np.sum(gu * gu) + np.sum(gv * gv))
        gc = g_perp - gv @ v.T
        sc = np.linalg.svd(gc, compute_uv=False)
        excess = np.clip(sc - lam, 0.0, None)
        return float(np.sqrt(rest_sq + excess @ excess))
    if mode != "estimated":
        raise ValueError(f"unknown certification mode: {mode}")

    left, right = _low_rank_part(x_next, x_tilde, alpha, lam)
    csr, csr_t = grad.csr, grad.csr_t

    def g_apply(block: np.ndarray) -> np.ndarray:
        return csr @ block + left @ (right.T @ block)

    def g_apply_t(block: np.ndarray) -> np.ndarray:
        return csr_t @ block + right @ (left.T @ block)

    rest_sq = 0.0
    if x_next.rank:
        gtu = g_apply_t(u)
        gv = g_apply(v)
        gv_perp = gv - u @ (u.T @ gv)
        rest_sq = float(np.sum(gtu * gtu) + np.sum(gv_perp * gv_perp))

    def gc_apply(vec: np.ndarray) -> np.ndarray:
        if x_next.rank:
            vec = vec - v @ (v.T @ vec)
        out = g_apply(vec[:, None])[:, 0]
        if x_next.rank:
            out -= u @ (u.T @ out)
        return out

    def gc_apply_t(vec: np.ndarray) -> np.ndarray:
        if x_next.rank:
            vec = vec - u @ (u.T @ vec)
        out = g_apply_t(vec[:, None])[:, 0]
        if x_next.rank:
            out -= v @ (v.T @ out)
        return out

    rng = np.random.Generator(np.random.Philox(0x5EED_CE27))
    found: list[tuple[float, np.ndarray, np.ndarray]] = []
    excess_sq = 0.0
    for _ in range(CERT_MAX_VECTORS):
        vec = rng.standard_normal(n)
        if x_next.rank:
            vec -= v @ (v.T @ vec)
        for _, _, qv in found:
            vec -= qv * float(qv @ vec)
        nrm = np.linalg.norm(vec)
        if nrm < 1e-300:
            break
        vec /= nrm
        s_est = 0.0
        uvec = np.zeros(m)
        for _ in range(CERT_POWER_ITERS):
            uvec = gc_apply(vec)
            for s_i, pu, qv in found:
                uvec -= pu * (s_i * float(qv @ vec))
            un = np.linalg.norm(uvec)
            if un < 1e-300:
                s_est = 0.0
                break
            uvec /= un
            vec_new = gc_apply_t(uvec)
            for s_i, pu, qv in found:
                vec_new -= qv * (s_i * float(pu @ uvec))
            s_est = float(np.linalg.norm(vec_new))
            if s_est < 1e-300:
                break
            vec = vec_new / s_est
        found.append((s_est, uvec, vec))
        if s_est <= lam:
            break
        excess_sq += (s_est - lam) ** 2
    estimate = math.sqrt(rest_sq + excess_sq)

    # Rigorous fallback: (Zhat - X_next)/alpha is itself a subgradient of the
    # nuclear part, so the min norm is at most ||Z - Zhat||_F / alpha.
    z_sq = ShiftedOperator(x_tilde, grad, alpha).frob_sq()
    if sigma_hat is not None:
        zhat_sq = float(sigma_hat @ sigma_hat)
    else:
        kept = x_next.sigma + alpha * lam
        zhat_sq = float(kept @ kept)
    bound = math.sqrt(max(z_sq - zhat_sq, 0.0)) / alpha
    return min(estimate, bound)


def inexact_prox_step(
    obs: ObservationSet,
    x_tilde: FactorPair,
    grad: SparseResidual,
    alpha_bb: float,
    params: StepParams,
    r_t: np.ndarray,
    eig_cfg: EigConfig,
    eps_target: float,
    cert_mode: str = "auto",
    cert_retries: int = 2,
) -> LiftOutcome:
    """Backtracking inexact proximal-gradient step at X~ = W H^T.

    For i = 0, 1, ...: alpha = alpha_bb * beta^i, Z = X~ - alpha * grad, a
    rank-k_t approximate eigenbasis of Z Z^T is computed from the warm start
    (k_t = rank(R_t)), the exact SVD of U_hat^T Z plus soft-thresholding at
    alpha * lam yields the candidate, and the first i passing the quadratic
    upper-bound test is accepted. If the certified inexactness exceeds
    eps_target, the eigensolver is re-run at the same alpha with a tighter
    residual tolerance (bounded retries, warm-started); exhausting the
    retries surfaces the certified value with a warning flag rather than
    failing.
    """
    if eps_target <= 0:
        raise ValueError("eps_target must be positive")
    m, n = x_tilde.m, x_tilde.n
    k_t = r_t.shape[1]
    half = grad.vals * 0.5  # residual of X~ on Omega
    f_base = float(half @ half)
    xt_omega = obs.vals + half
    i_max = (
        int(math.ceil(math.log(params.alpha_min / params.alpha_max) / math.log(params.beta)))
        + _BACKTRACK_SAFETY
    )
    warm = r_t
    sweeps_total = 0
    for i in range(i_max + 1):
        alpha = alpha_bb * params.beta**i
        zop = ShiftedOperator(x_tilde, grad, alpha)
        tol = eps_target / (params.alpha_max * max(k_t, 1))
        for retry in range(cert_retries + 1):
            if k_t == 0:
                eig = EigResult(np.zeros((m, 0)), np.zeros(0), np.zeros(0), 0, True)
            else:
                eig = solve_topk(zop, warm, replace(eig_cfg, residual_tol=tol))
                warm = eig.basis
            sweeps_total += eig.iters_used
            proj = zop.project_rows(eig.basis)
            u_small, sigma_hat, v_full = exact_svd_short_fat(proj)
            u_full = eig.basis @ u_small
            sigma, kept, largest_trunc = soft_threshold(sigma_hat, alpha * params.lam)
            x_next = SvdTriplet(
                np.ascontiguousarray(u_full[:, kept]),
                sigma,
                np.ascontiguousarray(v_full[:, kept]),
            )
            xn_omega = triplet_values(x_next, obs.rows, obs.cols)
            resid_next = xn_omega - obs.vals
            f_next = float(resid_next @ resid_next)
            g_inner = float(grad.vals @ (xn_omega - xt_omega))
            dist_sq = frob_dist_sq(x_next, x_tilde)
            rhs = f_base + g_inner + (params.delta / alpha) * dist_sq
            slack = _EQ5_SLACK * (abs(f_base) + abs(g_inner) + (params.delta / alpha) * dist_sq + 1.0)
            if f_next > rhs + slack:
                break  # sufficient-decrease test failed: backtrack further
            eps = certify_epsilon(
                x_next, x_tilde, grad, alpha, params.lam, cert_mode, sigma_hat=sigma_hat
            )
            if eps <= eps_target or retry == cert_retries:
                trunc_count = k_t - kept.size
                vec = u_full[:, kept.size].copy() if trunc_count > 0 else None
                return LiftOutcome(
                    x_next=x_next,
                    alpha_used=alpha,
                    backtracks=i,
                    eps_achieved=eps,
                    eps_warning=eps > eps_target,
                    largest_truncated=largest_trunc,
                    truncated_vector=vec,
                    trunc_count=trunc_count,
                    k_t=k_t,
                    f_base=f_base,
                    f_next=f_next,
                    grad_inner=g_inner,
                    dist_sq=dist_sq,
                    eig_sweeps=sweeps_total,
                    eig_converged=eig.converged,
                    eig_residual=float(eig.residuals.max()) if eig.residuals.size else 0.0,
                )
            tol *= 0.1
    raise BacktrackingError(
        f"no stepsize accepted after {i_max + 1} trials from alpha_bb={alpha_bb!r}"
    )
