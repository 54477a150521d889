"""Outer-loop orchestration, baselines, metrics, and trace emission.

The main solver alternates a factorization phase with one convex lifting
step per outer iteration; the pure-PG baseline is the same loop with zero
factorization epochs, and the factorization-only baseline runs BCD sweeps at
a fixed rank. Every run emits an IterationTrace whose CSV schema is stable.
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import (
    EvalSplit,
    LIPSCHITZ,
    ObservationSet,
    gradient,
    loss_quad,
    residual_on_omega,
    residual_on_omega_svd,
    rmse,
    rmse_factors,
)
from .eigensolver import EigConfig
from .kernels import SvdTriplet
from .mfsolver import factors_from_svd, bcd_epoch, mf_objective, mf_phase, svd_from_factors
from .operators import FactorPair
from .proxlift import (
    StepParams,
    WarmStartState,
    bb_stepsize,
    build_warmstart,
    inexact_prox_step,
    update_warmstart_after_step,
)

TRACE_HEADER = (
    "iter,time_s,obj,rel_obj,rank,rmse,rel_rmse,alpha,backtracks,"
    "eps_target,eps_achieved,eig_sweeps,k_t"
)

_GUARD_SLACK = 1e-9


class NumericalError(RuntimeError):
    """Non-finite objective or a violated structural guard; trace attached."""

    def __init__(self, message: str, trace: "IterationTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class SolverConfig:
    lam: float
    k0: int = 8
    mf_epochs: int = 3
    beta: float = 0.5
    delta: float = 0.99
    alpha_min: float = 1e-6
    alpha_max: float = 100.0
    eps0_scale: float = 0.1
    eps_rho: float = 0.7
    psi0_scale: float = 1e-2
    psi_rho: float = 0.5
    eig_memory: int = 3
    eig_max_iters: int = 30
    eig_method: str = "lm-krylov"
    max_outer_iters: int = 500
    stop_tol: float = 1e-7
    stop_window: int = 5
    threads: int = 0
    seed: int = 0
    init_scale: float = 1e-2
    # The printed stepsize formula clamps a curvature ratio, which breaks the
    # 2*delta*beta/L lower bound on sparse data; the reciprocal (spectral
    # stepsize) convention is the default for solver runs.
    bb_reciprocal: bool = True
    cert_mode: str = "auto"
    cert_retries: int = 2

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.k0 < 1:
            raise ValueError("k0 must be >= 1")
        if not (0 < self.beta < 1) or not (0 < self.delta < 1):
            raise ValueError("beta and delta must lie in (0, 1)")
        if not (0 < self.alpha_min <= self.alpha_max):
            raise ValueError("need 0 < alpha_min <= alpha_max")
        for name in ("eps0_scale", "eps_rho", "psi0_scale", "psi_rho", "stop_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def step_params(self) -> StepParams:
        return StepParams(
            lam=self.lam,
            alpha_min=self.alpha_min,
            alpha_max=self.alpha_max,
            beta=self.beta,
            delta=self.delta,
            bb_reciprocal=self.bb_reciprocal,
        )

    def eig_config(self) -> EigConfig:
        return EigConfig(
            memory=self.eig_memory,
            max_iters=self.eig_max_iters,
            residual_tol=1.0,  # overridden per trial by the lifting step
            method=self.eig_method,
        )


@dataclass
class Reference:
    """Persisted long-run solution used for relative metrics."""

    f_star: float
    rmse_star: float = float("nan")
    rmse_zero: float = float("nan")
    x_star: SvdTriplet | None = None


@dataclass
class IterationRecord:
    iter: int
    time_s: float
    obj: float
    rel_obj: float
    rank: int
    rmse: float
    rel_rmse: float
    alpha: float
    backtracks: int
    eps_target: float
    eps_achieved: float
    eig_sweeps: int
    k_t: int
    # Diagnostics beyond the CSV schema.
    f_prev: float = float("nan")      # F(X_t) before the step
    f_mf: float = float("nan")        # F(W_t, H_t) after the MF phase
    dist: float = float("nan")        # ||X_{t+1} - X~_t||_F
    eps_warning: bool = False

    def csv_row(self) -> str:
        cells = [
            str(self.iter),
            repr(float(self.time_s)),
            repr(float(self.obj)),
            repr(float(self.rel_obj)),
            str(self.rank),
            repr(float(self.rmse)),
            repr(float(self.rel_rmse)),
            repr(float(self.alpha)),
            str(self.backtracks),
            repr(float(self.eps_target)),
            repr(float(self.eps_achieved)),
            str(self.eig_sweeps),
            str(self.k_t),
        ]
        return ",".join(cells)


@dataclass
class IterationTrace:
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def final(self) -> IterationRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(TRACE_HEADER + "\n")
        for rec in self.records:
            out.write(rec.csv_row() + "\n")
        return out.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())


def relative_objective(f_val: float, f_star: float) -> float:
    """(F - F*) / F*; requires a positive reference objective."""
    if f_star <= 0:
        raise ValueError("reference objective must be positive")
    return (f_val - f_star) / f_star


def relative_rmse(r: float, r_star: float, r_zero: float) -> float:
    """(RMSE - RMSE*) / (RMSE(0) - RMSE*)."""
    denom = r_zero - r_star
    if denom <= 0:
        raise ValueError("RMSE(0) must exceed the reference RMSE")
    return (r - r_star) / denom


def _rng(seed: int) -> np.random.Generator:
    # Philox: counter-based, so runs are bit-reproducible for a given seed.
    return np.random.Generator(np.random.Philox(seed))


@contextlib.contextmanager
def _thread_limits(threads: int):
    if threads and threads > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            yield
    else:
        yield


def _metrics(
    obj: float,
    test_rmse: float,
    reference: Reference | None,
) -> tuple[float, float]:
    rel_obj = float("nan")
    rel_r = float("nan")
    if reference is not None:
        if reference.f_star > 0:
            rel_obj = relative_objective(obj, reference.f_star)
        if (
            np.isfinite(reference.rmse_star)
            and np.isfinite(reference.rmse_zero)
            and np.isfinite(test_rmse)
            and reference.rmse_zero > reference.rmse_star
        ):
            rel_r = relative_rmse(test_rmse, reference.rmse_star, reference.rmse_zero)
    return rel_obj, rel_r


def _initial_iterate(
    obs: ObservationSet, cfg: SolverConfig, rng: np.random.Generator
) -> SvdTriplet:
    """Random point near the origin at rank k0, re-factored through the
    optimal factorization so F(W~_0, H~_0) equals F(X_0) exactly."""
    w0 = cfg.init_scale * (2.0 * rng.random((obs.m, cfg.k0)) - 1.0)
    h0 = cfg.init_scale * (2.0 * rng.random((obs.n, cfg.k0)) - 1.0)
    return svd_from_factors(FactorPair(w0, h0))


def _window_converged(objs: list[float], cfg: SolverConfig) -> bool:
    if len(objs) <= cfg.stop_window:
        return False
    ref = objs[-1 - cfg.stop_window]
    return abs(ref - objs[-1]) < cfg.stop_tol * max(abs(ref), 1e-300)


def _run_lifted(
    obs: ObservationSet,
    split: EvalSplit | None,
    cfg: SolverConfig,
    mf_epochs: int,
    reference: Reference | None,
) -> tuple[SvdTriplet, FactorPair, IterationTrace]:
    rng = _rng(cfg.seed)
    params = cfg.step_params()
    eig_cfg = cfg.eig_config()
    trace = IterationTrace()
    t_start = time.perf_counter()
    with _thread_limits(cfg.threads):
        x = _initial_iterate(obs, cfg, rng)
        wf_tilde = factors_from_svd(x)
        res_x = residual_on_omega_svd(obs, x)
        grad_x = gradient(res_x)
        f_x = loss_quad(res_x) + cfg.lam * x.nuclear_norm()
        eps0 = cfg.eps0_scale * LIPSCHITZ * np.sqrt(loss_quad(res_x))
        ws = WarmStartState(
            rng=rng,
            psi=cfg.psi0_scale * (x.sigma[0] if x.rank else 1.0),
            psi_decay=cfg.psi_rho,
        )
        test_rmse = rmse(split, x) if split is not None else float("nan")
        rel_obj, rel_r = _metrics(f_x, test_rmse, reference)
        trace.append(
            IterationRecord(
                0, time.perf_counter() - t_start, f_x, rel_obj, x.rank, test_rmse,
                rel_r, float("nan"), 0, float("nan"), float("nan"), 0, x.rank,
            )
        )
        objs = [f_x]
        x_prev: SvdTriplet | None = None
        grad_prev = None
        alpha_prev = 1.0 / LIPSCHITZ
        for t in range(cfg.max_outer_iters):
            wf = mf_phase(obs, wf_tilde, cfg.lam, mf_epochs)
            f_mf = mf_objective(obs, wf, cfg.lam)
            if f_mf > f_x + _GUARD_SLACK * (1.0 + abs(f_x)):
                raise NumericalError(
                    f"MF phase guard violated at t={t}: F(W,H)={f_mf!r} > F(X)={f_x!r}",
                    trace,
                )
            grad_tilde = gradient(residual_on_omega(obs, wf))
            if x_prev is None:
                alpha_bb = 1.0 / LIPSCHITZ
            else:
                alpha_bb = bb_stepsize(x, x_prev, grad_x, grad_prev, params, alpha_prev)
            r_t = build_warmstart(x.u, wf.w, ws, cur_rank=x.rank)
            eps_t = eps0 * cfg.eps_rho**t
            out = inexact_prox_step(
                obs, wf, grad_tilde, alpha_bb, params, r_t, eig_cfg, eps_t,
                cert_mode=cfg.cert_mode, cert_retries=cfg.cert_retries,
            )
            x_prev, grad_prev = x, grad_x
            x = out.x_next
            update_warmstart_after_step(ws, out, out.truncated_vector)
            res_x = residual_on_omega_svd(obs, x)
            grad_x = gradient(res_x)
            f_prev = f_x
            f_x = loss_quad(res_x) + cfg.lam * x.nuclear_norm()
            if not np.isfinite(f_x):
                raise NumericalError(f"non-finite objective at t={t}", trace)
            wf_tilde = factors_from_svd(x)
            alpha_prev = out.alpha_used
            test_rmse = rmse(split, x) if split is not None else float("nan")
            rel_obj, rel_r = _metrics(f_x, test_rmse, reference)
            trace.append(
                IterationRecord(
                    t + 1, time.perf_counter() - t_start, f_x, rel_obj, x.rank,
                    test_rmse, rel_r, out.alpha_used, out.backtracks, eps_t,
                    out.eps_achieved, out.eig_sweeps, out.k_t,
                    f_prev=f_prev, f_mf=f_mf, dist=np.sqrt(out.dist_sq),
                    eps_warning=out.eps_warning,
                )
            )
            objs.append(f_x)
            if _window_converged(objs, cfg):
                break
    return x, wf_tilde, trace


def solve_mf_global(
    obs: ObservationSet,
    split: EvalSplit | None,
    cfg: SolverConfig,
    reference: Reference | None = None,
) -> tuple[SvdTriplet, FactorPair, IterationTrace]:
    """Alternate the factorization phase and the convex lifting step."""
    return _run_lifted(obs, split, cfg, cfg.mf_epochs, reference)


def solve_pg_baseline(
    obs: ObservationSet,
    split: EvalSplit | None,
    cfg: SolverConfig,
    reference: Reference | None = None,
) -> tuple[SvdTriplet, FactorPair, IterationTrace]:
    """Pure inexact proximal gradient: the same loop with no MF epochs."""
    return _run_lifted(obs, split, cfg, 0, reference)


def solve_mf_only(
    obs: ObservationSet,
    split: EvalSplit | None,
    cfg: SolverConfig,
    fixed_rank: int,
    reference: Reference | None = None,
) -> tuple[FactorPair, IterationTrace]:
    """Fixed-rank BCD only, from a random start away from the origin."""
    if fixed_rank < 1:
        raise ValueError("fixed_rank must be >= 1")
    rng = _rng(cfg.seed)
    trace = IterationTrace()
    t_start = time.perf_counter()
    with _thread_limits(cfg.threads):
        scale = 1.0 / np.sqrt(fixed_rank)
        wf = FactorPair(
            scale * rng.standard_normal((obs.m, fixed_rank)),
            scale * rng.standard_normal((obs.n, fixed_rank)),
        )
        obj = mf_objective(obs, wf, cfg.lam)
        test_rmse = rmse_factors(split, wf) if split is not None else float("nan")
        rel_obj, rel_r = _metrics(obj, test_rmse, reference)
        trace.append(
            IterationRecord(
                0, time.perf_counter() - t_start, obj, rel_obj, fixed_rank,
                test_rmse, rel_r, float("nan"), 0, float("nan"), float("nan"),
                0, fixed_rank,
            )
        )
        objs = [obj]
        for t in range(cfg.max_outer_iters):
            wf = bcd_epoch(obs, wf, cfg.lam)
            prev = obj
            obj = mf_objective(obs, wf, cfg.lam)
            if obj > prev + _GUARD_SLACK * (1.0 + abs(prev)):
                raise NumericalError(f"BCD objective increased at epoch {t}", trace)
            test_rmse = rmse_factors(split, wf) if split is not None else float("nan")
            rel_obj, rel_r = _metrics(obj, test_rmse, reference)
            trace.append(
                IterationRecord(
                    t + 1, time.perf_counter() - t_start, obj, rel_obj, fixed_rank,
                    test_rmse, rel_r, float("nan"), 0, float("nan"), float("nan"),
                    0, fixed_rank, f_prev=prev,
                )
            )
            objs.append(obj)
            if _window_converged(objs, cfg):
                break
    return wf, trace


# --- persisted reference container ------------------------------------------

TRIPLET_MAGIC = b"MCREF001"


def save_triplet(path, x: SvdTriplet) -> None:
    """Binary layout: magic, int64 m/n/k, sigma, U and V column-major float64."""
    with open(path, "wb") as fh:
        fh.write(TRIPLET_MAGIC)
        fh.write(struct.pack("<qqq", x.m, x.n, x.rank))
        fh.write(np.ascontiguousarray(x.sigma, dtype="<f8").tobytes())
        fh.write(np.asfortranarray(x.u, dtype="<f8").tobytes(order="F"))
        fh.write(np.asfortranarray(x.v, dtype="<f8").tobytes(order="F"))


def load_triplet(path) -> SvdTriplet:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != TRIPLET_MAGIC:
            raise ValueError(f"bad magic in {path}: {magic!r}")
        m, n, k = struct.unpack("<qqq", fh.read(24))
        sigma = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
        u = np.frombuffer(fh.read(8 * m * k), dtype="<f8").reshape((m, k), order="F")
        v = np.frombuffer(fh.read(8 * n * k), dtype="<f8").reshape((n, k), order="F")
    return SvdTriplet(np.ascontiguousarray(u), sigma, np.ascontiguousarray(v))


def save_reference(base_path, x: SvdTriplet, metrics: dict) -> None:
    save_triplet(base_path, x)
    with open(str(base_path) + ".metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_reference(base_path) -> Reference:
    x = load_triplet(base_path)
    with open(str(base_path) + ".metrics.json", "r", encoding="utf-8") as fh:
        metrics = json.load(fh)
    return Reference(
        f_star=float(metrics["f_star"]),
        rmse_star=float(metrics.get("rmse_star", "nan")),
        rmse_zero=float(metrics.get("rmse_zero", "nan")),
        x_star=x,
    )


def make_reference(
    obs: ObservationSet,
    split: EvalSplit | None,
    cfg: SolverConfig,
) -> tuple[SvdTriplet, dict, IterationTrace]:
    """Long-horizon run producing (X*, F*, RMSE(X*), RMSE(0)) for metrics."""
    x, _, trace = solve_mf_global(obs, split, cfg)
    metrics = {"f_star": trace.final().obj, "lam": cfg.lam, "seed": cfg.seed}
    if split is not None:
        metrics["rmse_star"] = rmse(split, x)
        metrics["rmse_zero"] = rmse(split, SvdTriplet.zero(obs.m, obs.n))
    return x, metrics, trace
