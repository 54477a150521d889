"""Acceptance suite: one test per criterion, each at its stated tolerance,
printing one pass/fail line. Run with ``pytest tests/test_acceptance.py -s``.

The ml100k leg of criterion 5 needs the dataset on disk (ua.base/ua.test in
$MFGLOBAL_ML100K_DIR or tests/data/ml-100k); it skips with an explicit
message when absent and the synthetic legs still run.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from mfglobal.data import gradient, load_ratings, residual_on_omega
from mfglobal.driver import (
    SolverConfig,
    relative_objective,
    solve_mf_global,
    solve_mf_only,
)
from mfglobal.eigensolver import EigConfig, lmkrylov_topk, power_topk
from mfglobal.kernels import SvdTriplet
from mfglobal.mfsolver import factors_from_svd
from mfglobal.operators import dense_operator, frob_dist_sq
from mfglobal.oracle import (
    dense_eig_topk,
    dense_grad,
    dense_pg_reference,
    dense_prox_exact,
)
from mfglobal.proxlift import StepParams, certify_epsilon, inexact_prox_step

from conftest import planted_obs, random_factors, random_obs, random_triplet, rng_for

L = 2.0  # gradient Lipschitz constant of the quadratic loss

# Frozen criterion-4/5 synthetic instance: planted rank 5, 30% observed,
# noise 0.1; lam chosen so the dense reference optimum has rank exactly 5.
CRIT4_SEED = 2024
CRIT4_LAM = 8.0

# Criterion-6 escape instances: planted rank 5, mf-only capped at rank 2.
CRIT6_LAM = 4.0


def _report(num: int, detail: str):
    print(f"[criterion {num:2d}] PASS  {detail}")


def _fail(num: int, detail: str):
    print(f"[criterion {num:2d}] FAIL  {detail}")


class _check:
    """Prints the criterion's pass/fail line as the block exits."""

    def __init__(self, num, detail=""):
        self.num = num
        self.detail = detail

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            _report(self.num, self.detail)
        else:
            _fail(self.num, f"{self.detail} ({exc_type.__name__}: {exc})")
        return False


def _ml100k_dir():
    cand = os.environ.get("MFGLOBAL_ML100K_DIR")
    if cand and Path(cand, "ua.base").exists():
        return Path(cand)
    local = Path(__file__).parent / "data" / "ml-100k"
    if (local / "ua.base").exists():
        return local
    return None


@pytest.fixture(scope="module")
def crit4_obs():
    return planted_obs(CRIT4_SEED, 100, 120, 5, 0.3, 0.1)


@pytest.fixture(scope="module")
def crit4_reference(crit4_obs):
    t0 = time.perf_counter()
    x_star, f_star = dense_pg_reference(crit4_obs, CRIT4_LAM, 10**4)
    return x_star, f_star, time.perf_counter() - t0


@pytest.fixture(scope="module")
def crit4_run(crit4_obs):
    cfg = SolverConfig(
        lam=CRIT4_LAM, k0=8, max_outer_iters=300, stop_tol=1e-9, seed=7
    )
    t0 = time.perf_counter()
    x, _, trace = solve_mf_global(crit4_obs, None, cfg)
    return x, trace, cfg, time.perf_counter() - t0


@pytest.fixture(scope="module")
def escape_runs():
    runs = []
    for seed in range(10):
        obs = planted_obs(1000 + seed, 60, 80, 5, 0.4, 0.05)
        cfg = SolverConfig(
            lam=CRIT6_LAM, k0=4, max_outer_iters=200, stop_tol=1e-9, seed=seed
        )
        _, _, tg = solve_mf_global(obs, None, cfg)
        _, tm = solve_mf_only(obs, None, cfg, fixed_rank=2)
        runs.append((cfg, tg, tm))
    return runs


@pytest.fixture(scope="module")
def ml100k_run():
    base = _ml100k_dir()
    if base is None:
        return None
    obs, split = load_ratings(base / "ua.base", base / "ua.test")
    cfg = SolverConfig(lam=15.0, threads=8, seed=0)
    t0 = time.perf_counter()
    x, _, trace = solve_mf_global(obs, split, cfg)
    return x, trace, cfg, time.perf_counter() - t0


@pytest.fixture(scope="module")
def lifted_traces(crit4_run, escape_runs, ml100k_run):
    """(config, trace) for every lifted-solver run in this session."""
    out = [(crit4_run[2], crit4_run[1])]
    out.extend((cfg, tg) for cfg, tg, _ in escape_runs)
    if ml100k_run is not None:
        out.append((ml100k_run[2], ml100k_run[1]))
    return out


def test_criterion_1_lemma1_identity():
    t0 = time.perf_counter()
    rng = rng_for(101)
    for _ in range(200):
        m = int(rng.integers(2, 61))
        n = int(rng.integers(2, 61))
        k = int(rng.integers(1, min(m, n, 10) + 1))
        x = random_triplet(rng, m, n, k, scale=5.0)
        wf = factors_from_svd(x)
        nuc = x.nuclear_norm()
        assert abs(0.5 * wf.frob_sq() - nuc) <= 1e-9 * nuc
        x_dense = x.dense()
        err = np.linalg.norm(wf.dense() - x_dense)
        assert err <= 1e-9 * np.linalg.norm(x_dense)
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    with _check(1, f"Lemma-1 factor identities, 200 triplets, {elapsed:.2f}s"):
        pass


def test_criterion_2_prox_oracle_equivalence():
    t0 = time.perf_counter()
    params = StepParams(lam=1.0)
    eig_cfg = EigConfig(memory=3, max_iters=300, residual_tol=1e-8)
    worst = 0.0
    for seed in range(50):
        rng = rng_for(3000 + seed)
        obs = random_obs(rng, 40, 60, frac=0.5)
        wf = random_factors(rng, 40, 60, 5, scale=0.7)
        grad = gradient(residual_on_omega(obs, wf))
        r0, _ = np.linalg.qr(rng.standard_normal((40, 10)))
        alpha_bb = float(0.2 + 2.0 * rng.random())
        out = inexact_prox_step(
            obs, wf, grad, alpha_bb, params, r0, eig_cfg, eps_target=1e-3
        )
        z = wf.dense() - out.alpha_used * dense_grad(obs, wf.dense())
        exact = dense_prox_exact(z, out.alpha_used * params.lam)
        err = float(np.linalg.norm(out.x_next.dense() - exact.dense()))
        assert err <= params.alpha_max * out.eps_achieved
        worst = max(worst, err - params.alpha_max * out.eps_achieved)
        eps_exact = certify_epsilon(
            exact, wf, grad, out.alpha_used, params.lam, mode="exact-dense"
        )
        assert eps_exact <= 1e-8
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    with _check(2, f"50 instances within alpha_max*eps of the dense prox, {elapsed:.1f}s"):
        pass


def test_criterion_3_eigensolver_correctness():
    t0 = time.perf_counter()
    for seed in range(20):
        rng = rng_for(4000 + seed)
        op = dense_operator(rng.standard_normal((60, 80)))
        z = op.dense()
        ref_w, _ = dense_eig_topk(z @ z.T, 5)
        r0, _ = np.linalg.qr(rng.standard_normal((60, 5)))
        cfg = EigConfig(memory=3, max_iters=5000, residual_tol=1e-7 * ref_w[0])
        lm = lmkrylov_topk(op, r0, cfg)
        pw = power_topk(op, r0, cfg)
        assert lm.converged and pw.converged
        assert np.max(np.abs(lm.eigvals - ref_w)) <= 1e-8 * ref_w[0]
        assert np.max(np.abs(pw.eigvals - ref_w)) <= 1e-8 * ref_w[0]
        assert lm.iters_used <= pw.iters_used
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    with _check(3, f"20 operators match the dense oracle; lm <= power sweeps, {elapsed:.1f}s"):
        pass


def test_criterion_4_global_optimality_desk_scale(crit4_reference, crit4_run):
    _, f_star, t_ref = crit4_reference
    x, trace, _, t_solve = crit4_run
    rel = relative_objective(trace.final().obj, f_star)
    assert rel <= 1e-6
    elapsed = t_ref + t_solve
    assert elapsed < 60.0
    with _check(4, f"relative objective {rel:.2e} <= 1e-6 vs 1e4-step dense PG, {elapsed:.0f}s"):
        pass


def test_criterion_5_rank_identification(crit4_reference, crit4_run, ml100k_run):
    x_star, _, _ = crit4_reference
    x, trace, _, _ = crit4_run
    ranks = [rec.rank for rec in trace.records]
    changes = [i for i in range(1, len(ranks)) if ranks[i] != ranks[i - 1]]
    stab = changes[-1] if changes else 1
    assert stab < len(ranks) - 1, "rank never stabilized"
    assert len(set(ranks[stab:])) == 1
    ref_rank = int(np.sum(np.linalg.svd(x_star, compute_uv=False) > 1e-9))
    assert ranks[-1] == ref_rank == 5
    detail = f"synthetic rank locks at {ranks[-1]} from iteration {stab}"
    if ml100k_run is None:
        with _check(5, detail + "; ml100k leg SKIPPED (dataset unavailable)"):
            pass
        pytest.skip(
            "ml100k dataset not present (no network in this environment); "
            "place ua.base/ua.test under $MFGLOBAL_ML100K_DIR to run the "
            "rank==68 leg"
        )
    _, mtrace, _, m_elapsed = ml100k_run
    mranks = [rec.rank for rec in mtrace.records]
    mchanges = [i for i in range(1, len(mranks)) if mranks[i] != mranks[i - 1]]
    mstab = mchanges[-1] if mchanges else 1
    assert mstab < len(mranks) - 1, "ml100k rank never stabilized"
    assert all(r == 68 for r in mranks[mstab:])
    assert m_elapsed < 600.0
    with _check(5, detail + f"; ml100k rank 68 from iteration {mstab}, {m_elapsed:.0f}s"):
        pass


def test_criterion_6_escape_behavior(escape_runs):
    wins = 0
    for _, tg, tm in escape_runs:
        fg, fm = tg.final().obj, tm.final().obj
        if (fm - fg) / fm >= 0.01:
            wins += 1
    assert wins == 10
    with _check(6, "mf-global beats rank-2 mf-only by >= 1% on 10/10 seeds"):
        pass


def test_criterion_7_stepsize_bounds(lifted_traces):
    lower = None
    for cfg, trace in lifted_traces:
        bound = 2.0 * cfg.delta * cfg.beta / L - 1e-12
        for rec in trace.records[1:]:
            assert rec.alpha >= bound, f"alpha {rec.alpha} below {bound} at {rec.iter}"
            assert rec.alpha <= cfg.alpha_max
            lower = rec.alpha if lower is None else min(lower, rec.alpha)
    with _check(7, f"all stepsizes in [2*delta*beta/L, alpha_max]; min seen {lower:.3g}"):
        pass


def test_criterion_8_descent_with_error(lifted_traces):
    for cfg, trace in lifted_traces:
        gamma = (1.0 - cfg.delta) / cfg.alpha_max
        for rec in trace.records[1:]:
            rhs = rec.f_prev + rec.eps_achieved * rec.dist - gamma * rec.dist**2 + 1e-9
            assert rec.obj <= rhs, f"iteration {rec.iter}: {rec.obj} > {rhs}"
    with _check(8, "F(X_{t+1}) <= F(X_t) + eps*dist - Gamma*dist^2 on every iteration"):
        pass


def test_criterion_9_factored_norm_identity():
    rng = rng_for(9000)
    for trial in range(100):
        m = int(rng.integers(3, 30))
        n = int(rng.integers(3, 30))
        a = random_triplet(rng, m, n, int(rng.integers(1, min(m, n) + 1)), scale=2.0)
        if trial % 2:
            b = random_factors(rng, m, n, int(rng.integers(1, 6)))
            b_dense = b.dense()
        else:
            b = random_triplet(rng, m, n, int(rng.integers(1, min(m, n) + 1)))
            b_dense = b.dense()
        ref = float(np.sum((a.dense() - b_dense) ** 2))
        assert abs(frob_dist_sq(a, b) - ref) <= 1e-9 * max(ref, 1.0)
    with _check(9, "factored ||A-B||_F^2 matches dense on 100 random pairs"):
        pass


def test_criterion_10_mf_guard(lifted_traces):
    for _, trace in lifted_traces:
        for rec in trace.records[1:]:
            assert rec.f_mf <= rec.f_prev + 1e-9 * (1.0 + abs(rec.f_prev))
    with _check(10, "F(W_t, H_t) <= F(X_t) at every outer iteration of every run"):
        pass
