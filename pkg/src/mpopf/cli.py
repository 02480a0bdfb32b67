"""Command-line entry point: ``mpopf {solve,oracle,grad,gen-case}``.

Exit codes:
    0  success (solve converged, oracle optimal, gradient written)
    1  input error (unreadable or invalid case, bad selector, unsupported path)
    2  usage error (argparse)
    3  solve stopped at max_iter
    4  solve diverged
    5  oracle certified the case infeasible

Thread count follows the BLAS environment (``OMP_NUM_THREADS``).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .casegen import CaseConfig, random_case
from .network import validate
from .oracle import InfeasibleError, parameter_gradient, solve_network
from .sensitivity import ParameterSelector, TotalCost, UnsupportedKindError, grad, grad_fd, solve_with_tape
from .solver import AdaptiveConfig, SolverConfig, solve

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_MAX_ITER, EXIT_DIVERGED, EXIT_INFEASIBLE = 0, 1, 2, 3, 4, 5
STATUS_EXIT = {"converged": EXIT_OK, "max_iter": EXIT_MAX_ITER, "diverged": EXIT_DIVERGED}


class InputError(Exception):
    pass


def _load(path):
    try:
        net = io.read_case(path)
    except (OSError, io.CaseFormatError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    errs = validate(net)
    if errs:
        raise InputError("case failed validation:\n  " + "\n  ".join(errs))
    return net


def _config(args) -> SolverConfig:
    adaptive = AdaptiveConfig(every=args.adapt_every) if args.adapt_every > 0 else None
    try:
        return SolverConfig(
            tol=args.tol, max_iter=args.max_iter, min_iter=args.min_iter,
            rho_p=args.rho_p, rho_theta=args.rho_theta, alpha=args.alpha, adaptive=adaptive,
            inner_iters=args.inner_iters, trace_every=args.trace_every,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=1e-3, help="absolute residual tolerance")
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--min-iter", type=int, default=0)
    p.add_argument("--rho-p", type=float, default=1.0)
    p.add_argument("--rho-theta", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0, help="over-relaxation in [1, 2)")
    p.add_argument("--adapt-every", type=int, default=10, help="0 disables adaptive penalties")
    p.add_argument("--inner-iters", type=int, default=10, help="inner iterations of QP-backed proxes")
    p.add_argument("--trace-every", type=int, default=1)


def cmd_solve(args) -> int:
    net = _load(args.case)
    config = _config(args)
    warm = None
    if args.warm:
        try:
            warm = io.read_warm(args.warm)
        except (OSError, io.CaseFormatError, ValueError, KeyError) as exc:
            raise InputError(f"bad warm start: {exc}") from exc
    try:
        sol = solve(net, config, warm=warm)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    io.write_json(io.solution_to_dict(net, sol, seed=args.seed), args.out)
    if args.trace:
        io.write_trace(sol.trace, args.trace)
    print(f"{sol.status} after {sol.iterations} iterations, objective {sol.objective:.10g}")
    return STATUS_EXIT[sol.status]


def cmd_oracle(args) -> int:
    net = _load(args.case)
    try:
        res = solve_network(net, tol=args.tol)
    except InfeasibleError as exc:
        io.write_json({"version": io.SOLUTION_VERSION, "status": "infeasible",
                       "infeasibility_gap": exc.gap}, args.out)
        print(f"infeasible: minimum total balance violation {exc.gap:.6g} MW")
        return EXIT_INFEASIBLE
    doc = {
        "version": io.SOLUTION_VERSION,
        "status": res.raw.status,
        "iterations": res.raw.iterations,
        "objective": res.objective,
        "prices": res.prices.tolist(),
        "groups": [
            {"name": g.name, "kind": g.kind.value, "p": res.p[i].tolist(), "theta": res.theta[i].tolist()}
            for i, g in enumerate(net.groups)
        ],
        "duals": {"equality": res.raw.y.tolist(), "inequality": res.raw.z.tolist()},
    }
    io.write_json(doc, args.out)
    print(f"{res.raw.status}, objective {res.objective:.10g}")
    return EXIT_OK if res.raw.status == "optimal" else EXIT_MAX_ITER


def cmd_grad(args) -> int:
    net = _load(args.case)
    try:
        sel = ParameterSelector.parse(net, args.wrt, analytic=not args.fd)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    config = _config(args)
    objective = TotalCost()
    if args.fd:
        g = grad_fd(net, sel, config, iters=args.iters, h=args.h, objective=objective)
        method = "finite_difference"
    else:
        try:
            tape = solve_with_tape(net, config, iters=args.iters)
        except (UnsupportedKindError, ValueError) as exc:
            raise InputError(f"{exc}") from exc
        g = grad(tape, sel, objective)
        method = "unrolled"
    doc = {"version": io.SOLUTION_VERSION, "wrt": args.wrt, "method": method,
           "iters": args.iters, "gradient": g.tolist(), "oracle_gradient": None}
    try:
        doc["oracle_gradient"] = parameter_gradient(solve_network(net), net, sel.group, sel.name).tolist()
    except (InfeasibleError, ValueError):
        # infeasible reference or a parameter without an envelope rule
        pass
    io.write_json(doc, args.out)
    print(f"{method} gradient of total cost w.r.t. {args.wrt}: norm {np.linalg.norm(g):.6g}")
    return EXIT_OK


def cmd_gen_case(args) -> int:
    if args.nodes < 1 or args.horizon < 1 or args.contingencies < 0:
        raise InputError("need --nodes >= 1, --horizon >= 1 and --contingencies >= 0")
    net = random_case(CaseConfig(
        num_nodes=args.nodes, horizon=args.horizon, contingencies=args.contingencies,
        seed=args.seed, load_scale=args.load_scale, batteries=not args.no_batteries,
    ))
    io.write_case(net, args.out)
    print(f"wrote {args.out}: {net.num_nodes} nodes, {net.num_devices} devices, K={net.num_contingencies}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpopf", description="Proximal message passing for multi-period DC OPF.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run message passing on a case")
    p.add_argument("case", type=Path)
    _solver_flags(p)
    p.add_argument("--warm", type=Path, help="solution file to warm start from")
    p.add_argument("--trace", type=Path, help="CSV residual trace")
    p.add_argument("--out", type=Path, default=Path("solution.json"))
    p.add_argument("--seed", type=int, default=None, help="recorded in the output; the solver is deterministic")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("oracle", help="solve the monolithic QP with the interior point reference")
    p.add_argument("case", type=Path)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", type=Path, default=Path("oracle.json"))
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("grad", help="gradient of the total cost with respect to a parameter")
    p.add_argument("case", type=Path)
    p.add_argument("--wrt", required=True, help="'<group name or index>:<param>', e.g. generator:p_max")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--fd", action="store_true", help="central finite differences instead of the adjoint")
    p.add_argument("--h", type=float, default=1e-4, help="relative finite-difference step")
    _solver_flags(p)
    p.add_argument("--out", type=Path, default=Path("grad.json"))
    p.set_defaults(func=cmd_grad)

    p = sub.add_parser("gen-case", help="write a synthetic case")
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--contingencies", type=int, default=0)
    p.add_argument("--load-scale", type=float, default=0.6)
    p.add_argument("--no-batteries", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("case.json"))
    p.set_defaults(func=cmd_gen_case)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
