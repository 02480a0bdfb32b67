"""Unrolled gradients of total cost against exact envelope gradients.

For battery-free corpus cases without contingencies (add ``--all`` for
the contingency cases too), computes the adjoint gradient after 10, 100
and 1000 message passing iterations for several parameters, and reports the
relative error against the interior point reference (-lambda).

    python scripts/sensitivity_checkpoints.py [--cases 20] [--iters 10 100 1000] [--all] [--adaptive]
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time

import numpy as np

from mpopf.casegen import corpus, random_case
from mpopf.oracle import parameter_gradient, solve_network
from mpopf.sensitivity import ParameterSelector, grad, solve_with_tape
from mpopf.solver import SolverConfig

SELECTORS = ("generator:b", "generator:p_max", "load:p_load", "ac_line:u")


def rel_error(g: np.ndarray, ref: np.ndarray, floor: float) -> float:
    """Norm-wise relative error; NaN when the exact gradient is numerically zero."""
    den = np.linalg.norm(ref)
    return float(np.linalg.norm(g - ref) / den) if den > floor else float("nan")


def run(cases: int, checkpoints: list[int], config: SolverConfig, with_contingencies: bool = False, out=print) -> dict:
    """Return ``{(case, selector): [err at each checkpoint]}``."""
    table = {}
    for i, cfg in enumerate(corpus()[:cases]):
        if cfg.contingencies and not with_contingencies:
            continue
        net = random_case(dataclasses.replace(cfg, batteries=False))
        ref = solve_network(net)
        floor = 1e-6 * abs(ref.objective)
        tapes = {n: solve_with_tape(net, config, iters=n) for n in checkpoints}
        for text in SELECTORS:
            sel = ParameterSelector.parse(net, text)
            exact = parameter_gradient(ref, net, sel.group, sel.name)
            errs = [rel_error(grad(tapes[n], sel), exact, floor) for n in checkpoints]
            table[(i, text)] = errs
            out(f"{i:2d} {text:16s} " + " ".join(f"{e:9.2e}" for e in errs))
    return table


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", type=int, default=20)
    ap.add_argument("--iters", type=int, nargs="+", default=[10, 100, 1000])
    ap.add_argument("--all", action="store_true", help="include cases with contingencies")
    ap.add_argument("--adaptive", action="store_true", help="use the adaptive penalty rule")
    args = ap.parse_args(argv)
    config = SolverConfig() if args.adaptive else SolverConfig(adaptive=None)
    t0 = time.perf_counter()
    table = run(args.cases, args.iters, config, args.all)
    errs = np.array([v for v in table.values() if not np.isnan(v).any()])
    print(f"{len(errs)} of {len(table)} (case, parameter) pairs have a nonzero exact gradient")
    print("median relative error per checkpoint:", " ".join(f"{n}:{m:.2e}" for n, m in zip(args.iters, np.median(errs, axis=0))))
    print(f"{time.perf_counter() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
