"""Command-line front end.

Exit codes: 0 success or converged, 1 input error, 2 iteration cap reached
(or undamped TRW-MP non-settling), 3 enumeration size guard.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .baselines import (
    EnumerationTooLarge,
    MpConfig,
    exact_log_partition,
    exact_marginals,
    solve_gradient_descent,
    solve_trw_mp,
)
from .dual import consistency_check, optimality_residual, primal_objective, to_primal
from .model import IsingSpec, ModelFormatError, fmt_float, gen_ising_grid, read_model, validate_model, write_model
from .solver import GpConfig, solve
from .spanning import (
    MAX_ENUM_VERTICES,
    enumerate_directed_trees,
    probs_from_trees,
    read_rho,
    uniform_tree_probs,
    validate_probs,
    write_rho,
)

EXIT_OK, EXIT_INPUT, EXIT_CAP, EXIT_SIZE = 0, 1, 2, 3


class InputError(Exception):
    pass


def format_marginals(m) -> str:
    """TRWMARG text: ``node i p...`` lines, then ``cond parent child`` row-major tables."""
    out = ["TRWMARG 1"]
    for i, mu in enumerate(m.mu_node):
        out.append(f"node {i} " + " ".join(fmt_float(x) for x in mu))
    for e, (u, v) in enumerate(m.graph.edges):
        out.append(f"cond {u} {v} " + " ".join(fmt_float(x) for x in m.cond_fwd[e].ravel()))
        out.append(f"cond {v} {u} " + " ".join(fmt_float(x) for x in m.cond_bwd[e].ravel()))
    return "\n".join(out) + "\n"


def _load_model(path):
    try:
        return read_model(path)
    except (OSError, ModelFormatError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_rho(path, mrf):
    if path is None:
        return uniform_tree_probs(mrf.graph)
    try:
        return read_rho(path, mrf.graph)
    except (OSError, ModelFormatError) as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_gen_ising(args) -> int:
    spec = IsingSpec(args.rows, args.cols, args.alpha_f, args.alpha_i, args.seed)
    write_model(gen_ising_grid(spec), args.output)
    return EXIT_OK


def cmd_tree_weights(args) -> int:
    mrf = _load_model(args.model)
    ep = uniform_tree_probs(mrf.graph)
    report = validate_probs(ep, mrf.graph, strict_positive=True)
    if report:
        raise InputError("; ".join(report))
    write_rho(ep, args.output)
    return EXIT_OK


def cmd_solve(args) -> int:
    mrf = _load_model(args.model)
    ep = _load_rho(args.rho, mrf)
    report = validate_probs(ep, mrf.graph, strict_positive=True)
    if report:
        raise InputError("invalid tree probabilities: " + "; ".join(report))
    dual = primal = None
    if args.alg == "trw-gp":
        cfg = GpConfig(
            eps_factor=args.eps_factor, tol=args.tol, max_sweeps=args.max_sweeps,
            primal_eval_every=args.primal_every, entropy_form=args.entropy,
        )
        state, marg, trace = solve(mrf, ep, cfg)
        dual, residual = trace.final_dual, trace.final_residual
    elif args.alg == "grad":
        state, trace = solve_gradient_descent(mrf, ep, tol=args.tol, max_iters=args.max_sweeps)
        marg = to_primal(state)
        dual, residual = trace.final_dual, trace.final_residual
    else:
        cfg = MpConfig(
            damping=args.damping, tol=args.tol, max_sweeps=args.max_sweeps,
            entropy_form=args.entropy, primal_eval_every=args.primal_every,
        )
        res = solve_trw_mp(mrf, ep, cfg)
        marg, trace = res.marginals, res.trace
        residual = res.changes[-1] if res.changes else 0.0
    primal = primal_objective(marg, ep, mrf, args.entropy)

    if args.trace:
        with open(args.trace, "w") as fh:
            trace.to_csv(fh, with_timing=not args.no_timing)
    if args.marginals:
        with open(args.marginals, "w") as fh:
            fh.write(format_marginals(marg))
    fields = [
        f"status {trace.status}",
        f"alg {args.alg}",
        f"sweeps {trace.sweeps}",
        f"dual_obj {fmt_float(dual) if dual is not None else 'NA'}",
        f"primal_obj {fmt_float(primal)}",
        f"residual {fmt_float(residual)}",
        f"consistency {fmt_float(consistency_check(marg))}",
    ]
    print(" ".join(fields))
    return EXIT_OK if trace.status == "converged" else EXIT_CAP


def cmd_exact(args) -> int:
    mrf = _load_model(args.model)
    try:
        logz = exact_log_partition(mrf)
        marg = exact_marginals(mrf)
    except EnumerationTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    print(f"logZ {fmt_float(logz)}")
    sys.stdout.write(format_marginals(marg))
    return EXIT_OK


def cmd_check(args) -> int:
    mrf = _load_model(args.model)
    failures = [f"model: {r}" for r in validate_model(mrf)]
    ep = _load_rho(args.rho, mrf)
    failures += [f"rho: {r}" for r in validate_probs(ep, mrf.graph, strict_positive=True)]
    if mrf.n <= args.enum_limit and mrf.graph.is_connected():
        trees = enumerate_directed_trees(mrf.graph)
        ref = probs_from_trees(mrf.graph, [(t, 1.0 / len(trees)) for t in trees])
        mt = uniform_tree_probs(mrf.graph)
        err = max(
            np.max(np.abs(ref.rho_root - mt.rho_root)),
            np.max(np.abs(ref.rho_fwd - mt.rho_fwd), initial=0.0),
            np.max(np.abs(ref.rho_bwd - mt.rho_bwd), initial=0.0),
        )
        line = f"matrix-tree vs enumeration ({len(trees)} trees): max error {err:.3e}"
        if err > 1e-10:
            failures.append(line)
        else:
            print("ok " + line)
    for f in failures:
        print("FAIL " + f)
    if not failures:
        print("ok model and tree probabilities valid")
    return EXIT_INPUT if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trwgp", description="Tree-reweighted inference on pairwise MRFs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("gen-ising", help="write a random Ising grid model")
    q.add_argument("--rows", type=int, required=True)
    q.add_argument("--cols", type=int, required=True)
    q.add_argument("--alpha-f", type=float, default=1.0, help="field range")
    q.add_argument("--alpha-i", type=float, default=1.0, help="interaction range")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_gen_ising)

    q = sub.add_parser("tree-weights", help="uniform directed spanning tree probabilities")
    q.add_argument("model")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_tree_weights)

    q = sub.add_parser("solve", help="run a solver and report objectives")
    q.add_argument("model")
    q.add_argument("rho", nargs="?", help="TRWRHO file (default: uniform over directed trees)")
    q.add_argument("--alg", choices=["trw-gp", "trw-mp", "grad"], default="trw-gp")
    q.add_argument("--tol", type=float, default=1e-8)
    q.add_argument("--max-sweeps", type=int, default=10000)
    q.add_argument("--eps-factor", type=float, default=0.5)
    q.add_argument("--damping", type=float, default=0.5)
    q.add_argument("--entropy", choices=["conditional", "mutual_info"], default="conditional",
                   help="entropy form for the primal objective")
    q.add_argument("--primal-every", type=int, default=1, help="sweeps between primal evaluations")
    q.add_argument("--trace", help="write the trace CSV here")
    q.add_argument("--marginals", help="write final marginals here")
    q.add_argument("--no-timing", action="store_true", help="zero the elapsed_ns column")
    q.set_defaults(func=cmd_solve)

    q = sub.add_parser("exact", help="log Z and marginals by enumeration")
    q.add_argument("model")
    q.set_defaults(func=cmd_exact)

    q = sub.add_parser("check", help="validate a model and tree probabilities")
    q.add_argument("model")
    q.add_argument("rho", nargs="?")
    q.add_argument("--enum-limit", type=int, default=8,
                   help=f"cross-check against enumeration up to this many vertices (max {MAX_ENUM_VERTICES})")
    q.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "enum_limit", 0) > MAX_ENUM_VERTICES:
        args.enum_limit = MAX_ENUM_VERTICES
    try:
        return args.func(args)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
