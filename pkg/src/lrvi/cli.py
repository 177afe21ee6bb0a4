"""Command line front end: ``lrvi gen|exact|infer|sweep``.

Exit status is 0 on success (a recorded non-convergence still counts as
success), 2 for bad input and 3 when a numerical fault aborts a run.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys

import numpy as np

from . import harness
from .constraints import ConstrainedOptions, ConstrainedSolver, ConstraintError
from .graph_model import FactorGraphError, read_factor_graph, save_factor_graph, scale_temperature
from .inference import InferenceOptions, NumericalFault
from .oracle import StateSpaceTooLarge, exact_stats

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
REGIMES = ("none", "diag", "offdiag", "onoff", "blockdiag", "purediag")


class InputError(Exception):
    pass


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
        return v
    return parse


def _emit(text: str, out: str | None):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _load(path):
    try:
        return read_factor_graph(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    if args.model == "fc":
        if args.n is None:
            raise InputError("gen fc needs --n")
        fg = harness.gen_fully_connected(args.n, args.h)
        meta = f"generator=fc N={args.n} h={args.h!r}"
    elif args.model == "wj":
        size = args.l if args.l is not None else args.n
        if size is None:
            raise InputError("gen wj needs --l")
        fg = harness.gen_wainwright_jordan(size, args.seed)
        meta = f"generator=wj L={size} seed={args.seed} rng={harness.RNG_ALGORITHM}"
    else:
        if args.n is None:
            raise InputError("gen potts needs --n")
        fg = harness.gen_potts_regular(args.n, args.seed)
        meta = f"generator=potts N={args.n} seed={args.seed} rng={harness.RNG_ALGORITHM}"
    _emit(f"# {meta}\n" + save_factor_graph(fg), args.out)
    return EXIT_OK


def cmd_exact(args) -> int:
    fg = _load(args.model)
    pairs = "all" if args.pairs == "all" else None
    st = exact_stats(scale_temperature(fg, args.t), pairs=pairs)
    buf = io.StringIO()
    buf.write(f"# log_Z={st.log_Z!r} T={args.t!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "i", "x_i", "j", "x_j", "value"])
    for i, m in enumerate(st.single_marginals):
        for y, v in enumerate(m):
            w.writerow(["marginal", i, y, "", "", repr(float(v))])
    for (i, j), tab in sorted(st.pair_marginals.items()):
        for y in range(tab.shape[0]):
            for z in range(tab.shape[1]):
                w.writerow(["pair", i, y, j, z, repr(float(tab[y, z]))])
    off = np.concatenate([[0], np.cumsum(fg.cards)]).astype(int)
    for (i, j) in sorted(st.pair_marginals):
        blk = st.covariance[off[i]:off[i + 1], off[j]:off[j + 1]]
        for y in range(blk.shape[0]):
            for z in range(blk.shape[1]):
                w.writerow(["covariance", i, y, j, z, repr(float(blk[y, z]))])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def _solver_options(args) -> ConstrainedOptions:
    inf = InferenceOptions()
    if args.tol_msg is not None:
        inf.tol_msg = args.tol_msg
    if args.max_iter is not None:
        inf.max_iter = args.max_iter
    o = ConstrainedOptions(inference=inf, solver=args.solver)
    if args.tol_constraint is not None:
        o.tol_constraint = args.tol_constraint
    if args.damping is not None:
        if not 0.0 <= args.damping < 1.0:
            raise InputError("--damping must lie in [0, 1)")
        o.damping = args.damping
        inf.damping = args.damping
    return o


def cmd_infer(args) -> int:
    fg = _load(args.model)
    scope = None if args.scope is None else args.scope
    solver = ConstrainedSolver(fg, args.regime, args.t, basis=args.basis, scope=scope,
                               opts=_solver_options(args))
    sol = solver.solve(args.t)
    buf = io.StringIO()
    buf.write(f"# regime={args.regime} T={args.t!r} status={sol.status} cycles={sol.cycles}"
              f" constraints={solver.n_constraints}"
              f" max_abs_delta={harness._fmt(sol.max_abs_delta() if sol.converged else float('inf'))}\n")
    if sol.diagnostic:
        buf.write(f"# diagnostic={sol.diagnostic}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable", "state", "marginal"])
    for i, m in enumerate(sol.marginals):
        for y, v in enumerate(np.asarray(m)):
            w.writerow([i, y, repr(float(v))])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    fg = _load(args.model)
    lo, hi = sorted((args.t_start, args.t_end))
    T = np.geomspace(lo, hi, args.t_steps) if args.t_steps > 1 else np.array([args.t_start])
    implied = "down" if args.t_end < args.t_start else "up"
    direction = args.direction or implied
    if args.t_steps > 1 and direction != implied:
        raise InputError(f"--direction {direction} contradicts --t-start {args.t_start!r}"
                         f" --t-end {args.t_end!r}")
    if direction == "down":
        T = T[::-1]
    sched = harness.AnnealSchedule(T, direction)
    opts = harness.SweepOptions(solver=_solver_options(args), oracle=args.oracle,
                                basis=args.basis, scope=args.scope)
    records = harness.anneal_sweep(fg, args.regime, sched, opts)
    _emit(harness.sweep_csv(records), args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _solver_flags(p):
    p.add_argument("--model", required=True, help="factor graph file")
    p.add_argument("--regime", choices=REGIMES, default="none")
    p.add_argument("--scope", choices=("2core", "all"), default=None)
    p.add_argument("--basis", choices=("orthonormal", "delta"), default="orthonormal")
    p.add_argument("--solver", choices=("clbp", "doubleloop"), default="clbp")
    p.add_argument("--tol-msg", type=_positive(float), default=None)
    p.add_argument("--tol-constraint", type=_positive(float), default=None)
    p.add_argument("--max-iter", type=_positive(int), default=None)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--out", default=None, help="output CSV (stdout when omitted)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lrvi", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a generated model")
    g.add_argument("model", choices=("fc", "wj", "potts"))
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--l", type=int, default=None)
    g.add_argument("--h", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("exact", help="exact statistics by enumeration")
    e.add_argument("--model", required=True)
    e.add_argument("--pairs", choices=("all", "edges"), default="edges")
    e.add_argument("--t", type=_positive(float), default=1.0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_exact)

    i = sub.add_parser("infer", help="constrained solve at one temperature")
    _solver_flags(i)
    i.add_argument("--t", type=_positive(float), default=1.0)
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("sweep", help="annealed temperature sweep")
    _solver_flags(s)
    s.add_argument("--t-start", type=_positive(float), required=True)
    s.add_argument("--t-end", type=_positive(float), required=True)
    s.add_argument("--t-steps", type=_positive(int), default=40)
    s.add_argument("--direction", choices=("up", "down"), default=None)
    s.add_argument("--oracle", choices=("auto", "on", "off"), default="auto")
    s.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, FactorGraphError, ConstraintError, StateSpaceTooLarge) as exc:
        print(f"lrvi: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"lrvi: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalFault, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"lrvi: numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
