"""Command-line front end: run solvers on rating data, compare methods, and
emit trace CSVs plus persisted reference solutions.

Exit codes: 0 ok, 1 numerical failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import DatasetError, load_ratings, rmse
from .driver import (
    NumericalError,
    Reference,
    SolverConfig,
    load_reference,
    make_reference,
    save_reference,
    save_triplet,
    solve_mf_global,
    solve_mf_only,
    solve_pg_baseline,
)
from .kernels import SvdTriplet
from .mfsolver import svd_from_factors

SOLVERS = ("mf-global", "pg", "mf-only")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file supplying flag defaults")
    p.add_argument("--data", required=True, help="training ratings file")
    p.add_argument("--test", help="held-out ratings file")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--k0", type=int, default=8)
    p.add_argument("--mf-epochs", type=int, default=3)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=0.99)
    p.add_argument("--alpha-min", type=float, default=1e-6)
    p.add_argument("--alpha-max", type=float, default=100.0)
    p.add_argument("--eig-memory", type=int, default=3)
    p.add_argument("--eig-method", choices=("power", "lm-krylov"), default="lm-krylov")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-7)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfglobal",
        description="Low-rank matrix recovery solvers with convex lifting steps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run one solver and write its trace")
    _add_common(solve)
    solve.add_argument("--solver", choices=SOLVERS, default="mf-global")
    solve.add_argument("--rank", type=int, help="fixed rank for --solver mf-only")
    solve.add_argument("--out", default="trace.csv", help="trace CSV path")
    solve.add_argument("--save-model", help="persist the final iterate (binary triplet)")
    solve.add_argument("--reference", help="reference container for relative metrics")

    compare = sub.add_parser("compare", help="run several solvers under one config")
    _add_common(compare)
    compare.add_argument(
        "--solvers", required=True, help="comma-separated subset of " + ",".join(SOLVERS)
    )
    compare.add_argument("--rank", type=int, help="fixed rank for mf-only")
    compare.add_argument("--out-dir", required=True, help="directory for aligned CSVs")
    compare.add_argument("--reference", help="reference container for relative metrics")

    ref = sub.add_parser(
        "make-reference", help="long-horizon run persisting (X*, F*, RMSE values)"
    )
    _add_common(ref)
    ref.add_argument("--out", required=True, help="reference container path")
    return parser


def _peek_config(argv: list[str]) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _load_config_defaults(path: str) -> dict:
    defaults = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            defaults[key.strip().replace("-", "_")] = value.strip()
    return defaults


def _config_from_args(args) -> SolverConfig:
    return SolverConfig(
        lam=args.lam,
        k0=args.k0,
        mf_epochs=args.mf_epochs,
        beta=args.beta,
        delta=args.delta,
        alpha_min=args.alpha_min,
        alpha_max=args.alpha_max,
        eig_memory=args.eig_memory,
        eig_method=args.eig_method,
        max_outer_iters=args.max_iters,
        stop_tol=args.tol,
        threads=args.threads,
        seed=args.seed,
    )


def _load_data(args):
    obs, split = load_ratings(args.data, args.test)
    return obs, split


def _run_one(solver: str, obs, split, cfg, rank, reference):
    if solver == "mf-global":
        x, _, trace = solve_mf_global(obs, split, cfg, reference)
        return x, trace
    if solver == "pg":
        x, _, trace = solve_pg_baseline(obs, split, cfg, reference)
        return x, trace
    if rank is None:
        raise DatasetError("--rank is required for --solver mf-only")
    wf, trace = solve_mf_only(obs, split, cfg, rank, reference)
    return svd_from_factors(wf), trace


def _save_id_maps(base: Path, obs) -> None:
    if obs.row_ids is None or obs.col_ids is None:
        return
    np.savetxt(str(base) + ".rows.ids", obs.row_ids, fmt="%d")
    np.savetxt(str(base) + ".cols.ids", obs.col_ids, fmt="%d")


def _cmd_solve(args) -> int:
    obs, split = _load_data(args)
    cfg = _config_from_args(args)
    reference = load_reference(args.reference) if args.reference else None
    x, trace = _run_one(args.solver, obs, split, cfg, args.rank, reference)
    trace.save_csv(args.out)
    if args.save_model:
        save_triplet(args.save_model, x)
        _save_id_maps(Path(args.save_model), obs)
    final = trace.final()
    print(
        f"{args.solver}: {len(trace) - 1} iterations, objective {final.obj:.8g}, "
        f"rank {final.rank}, time {final.time_s:.2f}s"
    )
    return 0


def _cmd_compare(args) -> int:
    solvers = [s for s in args.solvers.split(",") if s]
    if not solvers:
        raise DatasetError("empty solver list")
    for s in solvers:
        if s not in SOLVERS:
            raise DatasetError(f"unknown solver: {s}")
    obs, split = _load_data(args)
    cfg = _config_from_args(args)
    reference = load_reference(args.reference) if args.reference else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for solver in solvers:
        x, trace = _run_one(solver, obs, split, cfg, args.rank, reference)
        trace.save_csv(out_dir / f"{solver}.csv")
        final = trace.final()
        rows.append((solver, final))
    print("solver,final_obj,final_rel_obj,final_rmse,final_rel_rmse,wall_s,rank")
    for solver, final in rows:
        print(
            f"{solver},{final.obj!r},{final.rel_obj!r},{final.rmse!r},"
            f"{final.rel_rmse!r},{final.time_s:.3f},{final.rank}"
        )
    return 0


def _cmd_make_reference(args) -> int:
    obs, split = _load_data(args)
    cfg = _config_from_args(args)
    x, metrics, trace = make_reference(obs, split, cfg)
    save_reference(args.out, x, metrics)
    _save_id_maps(Path(args.out), obs)
    print(
        f"reference: objective {metrics['f_star']!r}, rank {x.rank}, "
        f"{len(trace) - 1} iterations"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    config_path = _peek_config(argv)
    if config_path:
        try:
            defaults = _load_config_defaults(config_path)
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
        except DatasetError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for action in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in action._actions}
            action.set_defaults(**{k: _coerce(action, k, v) for k, v in defaults.items() if k in known})
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_make_reference(args)
    except (OSError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


def _coerce(parser_action, key: str, value: str):
    for action in parser_action._actions:
        if action.dest == key and action.type is not None:
            return action.type(value)
    return value


if __name__ == "__main__":
    sys.exit(main())
