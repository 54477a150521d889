"""Low-rank matrix recovery via alternating factorization and inexact
nuclear-norm proximal-gradient lifting steps, with baselines and dense
reference oracles."""

from .data import (
    EvalSplit,
    ObservationSet,
    SparseResidual,
    load_ratings,
    loss_quad,
    residual_on_omega,
    residual_on_omega_svd,
    rmse,
)
from .driver import (
    IterationTrace,
    NumericalError,
    Reference,
    SolverConfig,
    load_reference,
    load_triplet,
    make_reference,
    relative_objective,
    relative_rmse,
    save_reference,
    save_triplet,
    solve_mf_global,
    solve_mf_only,
    solve_pg_baseline,
)
from .eigensolver import EigConfig, EigResult, lmkrylov_topk, power_topk
from .kernels import SvdTriplet, orthonormalize, soft_threshold
from .mfsolver import bcd_epoch, factors_from_svd, mf_objective, mf_phase
from .operators import FactorPair, ShiftedOperator, frob_dist_sq, inner_product
from .proxlift import (
    LiftOutcome,
    StepParams,
    WarmStartState,
    bb_stepsize,
    build_warmstart,
    certify_epsilon,
    inexact_prox_step,
    update_warmstart_after_step,
)

__version__ = "0.1.0"

__all__ = [
    "EigConfig",
    "EigResult",
    "EvalSplit",
    "FactorPair",
    "IterationTrace",
    "LiftOutcome",
    "NumericalError",
    "ObservationSet",
    "Reference",
    "ShiftedOperator",
    "SolverConfig",
    "SparseResidual",
    "StepParams",
    "SvdTriplet",
    "WarmStartState",
    "bb_stepsize",
    "bcd_epoch",
    "build_warmstart",
    "certify_epsilon",
    "factors_from_svd",
    "frob_dist_sq",
    "inexact_prox_step",
    "inner_product",
    "lmkrylov_topk",
    "load_ratings",
    "load_reference",
    "load_triplet",
    "loss_quad",
    "make_reference",
    "mf_objective",
    "mf_phase",
    "orthonormalize",
    "power_topk",
    "relative_objective",
    "relative_rmse",
    "residual_on_omega",
    "residual_on_omega_svd",
    "rmse",
    "save_reference",
    "save_triplet",
    "soft_threshold",
    "solve_mf_global",
    "solve_mf_only",
    "solve_pg_baseline",
    "update_warmstart_after_step",
]
