"""Message passing against the interior point reference on the benchmark corpus.

For every corpus case, reports iterations and relative objective gap at
several tolerances (fixed penalties), warm versus cold starts after a 5%
load perturbation, the adaptive penalty rule, and over-relaxation.

    python scripts/corpus_convergence.py [--cases 20] [--max-iter 20000]
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time

import numpy as np

from mpopf.casegen import corpus, random_case
from mpopf.network import DeviceKind, replace_group_param
from mpopf.oracle import solve_network
from mpopf.solver import AdaptiveConfig, SolverConfig, solve


def perturb_loads(net, rel: float = 0.05, seed: int = 0):
    """Scale every load entry by an independent factor in ``[1 - rel, 1 + rel]``."""
    rng = np.random.default_rng(seed)
    for g, grp in enumerate(net.groups):
        if grp.kind == DeviceKind.FIXED_LOAD:
            p = net.group_params(g)["p_load"]
            net = replace_group_param(net, g, "p_load", p * rng.uniform(1 - rel, 1 + rel, p.shape))
    return net


def rms_bound(net, tol: float) -> float:
    return tol * np.sqrt(2 * net.num_terminals * net.horizon * (net.num_contingencies + 1))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", type=int, default=20)
    ap.add_argument("--max-iter", type=int, default=20_000)
    args = ap.parse_args(argv)
    fixed = SolverConfig(adaptive=None, max_iter=args.max_iter)
    print("case N T K | iters@1e-2 1e-3 1e-4 gap@1e-4 | warm cold @1e-3 | adaptive iters gap ratio_p ratio_th | alpha1.5 iters gap")
    t0 = time.perf_counter()
    for i, cfg in enumerate(corpus()[: args.cases]):
        net = random_case(cfg)
        ref = solve_network(net).objective
        its = {}
        for tol in (1e-2, 1e-3, 1e-4):
            sol = solve(net, dataclasses.replace(fixed, tol=tol))
            its[tol] = sol.iterations if sol.status == "converged" else -1
        gap = abs(sol.objective - ref) / abs(ref)
        base = solve(net, dataclasses.replace(fixed, tol=1e-3))
        pert = perturb_loads(net, seed=i)
        cold = solve(pert, dataclasses.replace(fixed, tol=1e-3)).iterations
        warm = solve(pert, dataclasses.replace(fixed, tol=1e-3), warm=base).iterations
        ad = solve(net, SolverConfig(tol=1e-4, max_iter=args.max_iter, adaptive=AdaptiveConfig()))
        r = ad.residuals
        ov = solve(net, dataclasses.replace(fixed, tol=1e-4, alpha=1.5))
        print(
            f"{i:2d} {cfg.num_nodes:2d} {cfg.horizon} {cfg.contingencies} | "
            f"{its[1e-2]:6d} {its[1e-3]:6d} {its[1e-4]:6d} {gap:8.1e} | {warm:6d} {cold:6d} | "
            f"{ad.status[:4]} {ad.iterations:6d} {abs(ad.objective - ref) / abs(ref):8.1e} "
            f"{r.r_primal_p / r.r_dual_p:7.2f} {r.r_primal_theta / r.r_dual_theta:7.2f} | "
            f"{ov.status[:4]} {ov.iterations:6d} {abs(ov.objective - ref) / abs(ref):8.1e}",
            flush=True,
        )
    print(f"{time.perf_counter() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
