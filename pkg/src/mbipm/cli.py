"""Command line front end.

Exit codes: 0 success, 1 non-convergence, 2 input error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .balancing import METHODS, BalanceConfig, BalancerState, PathSchedule, balance, stabilized_path
from .core import DomainError, NumericalError, ShapeError, SupportError, magic
from .io import (
    BALANCE_COLUMNS, REGISTER_COLUMNS, TRANSPORT_COLUMNS, InputError, TraceWriter, read_matrix,
    read_points, thread_limit, write_json, write_matrix_csv, write_plan,
)
from .ipm import ipmb_solve, snne_solve, snne_sparse_solve
from .registration import RegistrationConfig, register_rigid, register_rigid_entropic
from .support import SupportSet

EXIT_OK, EXIT_NOCONV, EXIT_INPUT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_INPUT)


def _positive(v):
    x = float(v)
    if not x > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return x


def _posint(v):
    k = int(v)
    if k < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return k


def _schedule_args(p, t0=1.0, eta=1.5, tmax=1e6):
    p.add_argument("--t0", type=_positive, default=t0, help="first inverse temperature")
    p.add_argument("--eta", type=float, default=eta, help="geometric factor (> 1)")
    p.add_argument("--tmax", type=_positive, default=tmax, help="last inverse temperature")


def _output_args(p):
    p.add_argument("--report", metavar="JSON", help="report path ('-' for stdout)")
    p.add_argument("--trace", metavar="CSV", help="per-iteration trace path")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock seconds in traces (otherwise 0, for reproducible files)")
    p.add_argument("--seed", type=int, default=0, help="seed for generated inputs")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mbipm", description="Matrix balancing and interior point optimal transport.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--repro", choices=("table1", "table2", "fig3"),
                   help="regenerate a reference experiment and print it")
    p.add_argument("--repro-n", type=_posint, default=None,
                   help="problem size for --repro (table1/fig3: 50, table2: 200)")
    p.add_argument("--out", metavar="DIR", help="directory for --repro CSV output")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    b = sub.add_parser("balance", help="balance a positive matrix")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", metavar="FILE", help="matrix A (.csv dense or .coo 'i j value')")
    src.add_argument("--magic", type=_posint, metavar="N", help="use A = exp(-scale * magic(N))")
    src.add_argument("--random", type=_posint, metavar="N", help="use a seeded random positive N x N matrix")
    b.add_argument("--scale", type=_positive, default=1.0, help="t in exp(-t * magic(N))")
    b.add_argument("--method", choices=METHODS, default="kr")
    b.add_argument("--tol", type=_positive, default=None, help="balancing tolerance (default 1e-5 sqrt(n))")
    b.add_argument("--max-iter", type=_posint, default=500)
    b.add_argument("--path", action="store_true",
                   help="with --magic, follow t0 * eta^k up to --scale by translation")
    b.add_argument("--eta", type=float, default=2.0, help="factor between path temperatures")
    b.add_argument("--steps", type=_posint, default=4, help="number of path temperatures")
    _output_args(b)

    t = sub.add_parser("transport", help="solve an assignment-form transport problem")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", metavar="FILE", help="dense cost matrix (.csv)")
    src.add_argument("--magic", type=_posint, metavar="N", help="cost magic(N)")
    src.add_argument("--random", type=_posint, metavar="N", help="seeded random integer cost")
    t.add_argument("--max-cost", type=_posint, default=100, help="upper bound for --random costs")
    t.add_argument("--scale", type=_positive, default=1.0, help="multiply the cost by this factor")
    t.add_argument("--solver", choices=("snne", "ipmb"), default="snne")
    t.add_argument("--method", choices=METHODS, default="kr", help="balancing method for snne")
    t.add_argument("--sparse", action="store_true", help="use evolving sparse supports")
    t.add_argument("--k", type=_posint, default=20, help="per row/column selection size")
    t.add_argument("--epsilon", type=_positive, default=None, help="slack threshold instead of --k")
    t.add_argument("--xi-max", type=int, default=3, help="support rebuilds")
    _schedule_args(t)
    t.add_argument("--reltol", type=_positive, default=1e-5, help="relative duality gap target")
    t.add_argument("--reference", default=None,
                   help="optimal value for relative gaps; 'auto' computes it exactly")
    t.add_argument("--no-early-termination", action="store_true")
    t.add_argument("--et-threshold", type=float, default=100.0)
    t.add_argument("--tol", type=_positive, default=None, help="balancing tolerance")
    t.add_argument("--plan", metavar="FILE", help="write plan entries as 'i j value'")
    t.add_argument("--plan-threshold", type=float, default=1e-12)
    _output_args(t)

    r = sub.add_parser("register", help="rigid registration of two point clouds "
                       "(source is re-centered; remove translations from the target beforehand)")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--source", metavar="FILE", help="points y_i, one per line")
    src.add_argument("--synthetic", type=_posint, metavar="N",
                     help="random anisotropic cloud with a rotated, shuffled copy")
    r.add_argument("--target", metavar="FILE", help="points z_j, one per line")
    r.add_argument("--angle", type=float, default=30.0, help="rotation angle (degrees) for --synthetic")
    r.add_argument("--sparse", action="store_true", help="single t-path on sparse supports")
    r.add_argument("--k", type=_posint, default=20)
    r.add_argument("--xi-max", type=int, default=3)
    _schedule_args(r, tmax=1e7)
    r.add_argument("--target-error", type=float, default=1e-4)
    r.add_argument("--max-outer", type=_posint, default=50)
    r.add_argument("--regularizer", type=float, default=None, help="eta in the ||Q - I||^2 penalty")
    r.add_argument("--fix-reflection", action="store_true")
    _output_args(r)

    m = sub.add_parser("magic", help="print magic(N) as CSV")
    m.add_argument("n", type=_posint)
    m.add_argument("--output", metavar="CSV", default="-")
    return p


def _check_schedule(args) -> PathSchedule:
    return PathSchedule(args.t0, args.eta, args.tmax)


def _balance_problem(args):
    if args.magic:
        return magic(args.magic).astype(float), args.scale, None
    if args.random:
        rng = np.random.default_rng(args.seed)
        A = rng.uniform(0.1, 1.0, (args.random, args.random))
        return -np.log(A), 1.0, None
    vals, rows, cols, n = read_matrix(args.input)
    if np.any(vals < 0):
        raise InputError(f"{args.input}: entries must be nonnegative")
    if rows is None:
        pos = vals > 0
        C = np.where(pos, -np.log(np.where(pos, vals, 1.0)), 0.0)
        sup = None if pos.all() else SupportSet.from_mask(pos)
        return C, 1.0, sup
    keep = vals > 0
    C = np.zeros((n, n))
    C[rows[keep], cols[keep]] = -np.log(vals[keep])
    sup = SupportSet(n, rows[keep], cols[keep])
    if len(sup) == n * n:
        sup = None
    return C, 1.0, sup


def cmd_balance(args) -> int:
    C, t, sup = _balance_problem(args)
    n = C.shape[0]
    cfg = BalanceConfig(tol=args.tol, max_iter=args.max_iter)
    writer = TraceWriter(args.trace, BALANCE_COLUMNS, args.timing)
    try:
        if args.path:
            if not args.magic:
                raise InputError("--path needs --magic")
            ts = [args.scale / args.eta ** k for k in range(args.steps - 1, -1, -1)]
            res = stabilized_path(C, ts, args.method, cfg, support=sup)
            rep = res.reports[-1]
            reports = res.reports
            for r in reports:
                for row in r.trace:
                    writer.write(row)
            extra = {"path": [{"t": tk, **r.to_dict()} for tk, r in zip(res.ts, reports)],
                     "failed_index": res.failed_index}
        else:
            state, rep = balance(BalancerState(n, np.zeros(2 * n), t, sup), C, args.method, cfg)
            for row in rep.trace:
                writer.write(row)
            extra = {}
    finally:
        writer.close()
    trace = [dict(r) for r in rep.trace]
    if not args.timing:
        for r in trace:
            r["wall_seconds"] = 0.0
    out = {"command": "balance", "n": n, "t": t, **rep.to_dict(), "trace": trace, **extra}
    if args.report:
        write_json(args.report, out)
    else:
        print(f"method={rep.method} n={n} converged={rep.converged} iterations={rep.iterations} "
              f"error={rep.error:.3e} geometric_mean_norm={rep.geometric_mean_norm:.6g}")
    return EXIT_OK if rep.converged else EXIT_NOCONV


def _transport_cost(args) -> np.ndarray:
    if args.magic:
        C = magic(args.magic).astype(float)
    elif args.random:
        rng = np.random.default_rng(args.seed)
        C = rng.integers(0, args.max_cost + 1, (args.random, args.random)).astype(float)
    else:
        vals, rows, cols, n = read_matrix(args.input)
        if rows is not None:
            raise InputError("transport costs must be dense (.csv)")
        C = vals
        if np.any(C < 0):
            raise InputError(f"{args.input}: cost entries must be nonnegative")
    return C * args.scale


def _reference(args, C):
    if args.reference is None:
        return None
    if args.reference == "auto":
        from scipy.optimize import linear_sum_assignment
        r, c = linear_sum_assignment(C)
        return float(C[r, c].sum())
    try:
        return float(args.reference)
    except ValueError:
        raise InputError("--reference must be a number or 'auto'") from None


def cmd_transport(args) -> int:
    C = _transport_cost(args)
    sched = _check_schedule(args)
    ref = _reference(args, C)
    et = not args.no_early_termination
    cfg = BalanceConfig(tol=args.tol)
    if args.solver == "ipmb":
        if args.sparse:
            raise InputError("--sparse applies to the snne solver only")
        pot, plan, rep = ipmb_solve(C, sched, reference_value=ref, reltol=args.reltol,
                                    early_termination=et, et_threshold=args.et_threshold)
    elif args.sparse:
        pot, plan, rep = snne_sparse_solve(
            C, sched, k=None if args.epsilon else args.k, epsilon=args.epsilon,
            xi_max=args.xi_max, method=args.method, cfg=cfg, reference_value=ref,
            reltol=args.reltol, early_termination=et, et_threshold=args.et_threshold)
    else:
        pot, plan, rep = snne_solve(C, sched, args.method, cfg, reference_value=ref,
                                    reltol=args.reltol, early_termination=et,
                                    et_threshold=args.et_threshold)
    writer = TraceWriter(args.trace, TRANSPORT_COLUMNS, args.timing)
    for row in rep.trace:
        writer.write(row)
    writer.close()
    if args.plan:
        write_plan(args.plan, plan, args.plan_threshold)
    out = {"command": "transport", "n": C.shape[0], "solver": args.solver, "sparse": args.sparse,
           "reference_value": ref, **rep.to_dict(), "nu": pot.nu.tolist(),
           "max_support_size": max([r["support_size"] for r in rep.trace], default=rep.support_size)}
    if not args.timing:
        for row in out["trace"]:
            row["seconds"] = 0.0
    if args.report:
        write_json(args.report, out)
    else:
        print(f"solver={args.solver} n={C.shape[0]} termination={rep.termination} "
              f"t={rep.t_achieved:.6g} gap={rep.duality_gap:.3e} relative_gap={rep.relative_gap:.3e}")
    return EXIT_OK if rep.termination in ("gap_met", "early_terminated") else EXIT_NOCONV


def synthetic_clouds(n: int, angle_deg: float, seed: int):
    """Anisotropic Gaussian cloud ``Y`` and ``Z`` with ``z_j = R y_{p(j)}``."""
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(n, 3)) * np.array([1.0, 0.6, 0.3])
    Y -= Y.mean(axis=0)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = _rotation(axis, math.radians(angle_deg))
    perm = rng.permutation(n)
    return Y, (Y @ R.T)[perm], R, perm


def _rotation(axis, angle) -> np.ndarray:
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def cmd_register(args) -> int:
    if args.synthetic:
        Y, Z, _, _ = synthetic_clouds(args.synthetic, args.angle, args.seed)
    else:
        if not args.target:
            raise InputError("--source needs --target")
        Y, Z = read_points(args.source), read_points(args.target)
        if Y.shape != Z.shape:
            raise InputError(f"point clouds differ: {Y.shape} vs {Z.shape}")
    cfg = RegistrationConfig(target_error=args.target_error, max_outer=args.max_outer,
                             regularizer_weight=args.regularizer, fix_reflection=args.fix_reflection,
                             schedule=_check_schedule(args))
    if args.sparse:
        tr, plan, rep = register_rigid_entropic(Y, Z, k=args.k, xi_max=args.xi_max, cfg=cfg)
    else:
        tr, plan, rep = register_rigid(Y, Z, cfg)
    writer = TraceWriter(args.trace, REGISTER_COLUMNS, args.timing)
    for row in rep.trace:
        writer.write(row)
    writer.close()
    out = {"command": "register", "n": int(Y.shape[0]), "sparse": args.sparse, **rep.to_dict(tr)}
    if not args.timing:
        for row in out["trace"]:
            row["transport_seconds"] = row["svd_seconds"] = 0.0
    if args.report:
        write_json(args.report, out)
    else:
        print(f"n={Y.shape[0]} converged={rep.converged} iterations={rep.iterations} error={rep.error:.3e}")
    return EXIT_OK if rep.converged else EXIT_NOCONV


def cmd_magic(args) -> int:
    write_matrix_csv(args.output, magic(args.n))
    return EXIT_OK


def run_repro(args) -> int:
    from . import repro
    return repro.run(args.repro, args.repro_n, args.out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with thread_limit():
            if args.repro:
                return run_repro(args)
            if args.command is None:
                parser.print_help()
                return EXIT_INPUT
            handler = {"balance": cmd_balance, "transport": cmd_transport,
                       "register": cmd_register, "magic": cmd_magic}[args.command]
            return handler(args)
    except (InputError, ShapeError, DomainError, SupportError, OSError) as exc:
        print(f"mbipm: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"mbipm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
