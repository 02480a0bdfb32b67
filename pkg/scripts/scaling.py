"""Per-iteration wall time as N, T and K are doubled from a baseline.

    python scripts/scaling.py [--nodes 200 --horizon 24 --contingencies 8 --iters 20]
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from mpopf.casegen import CaseConfig, random_case
from mpopf.devices import ProxEngine
from mpopf.solver import SolverConfig, init_state, iterate


def time_per_iteration(cfg: CaseConfig, iters: int = 20, warmup: int = 3) -> float:
    """Median wall time of one outer iteration (fixed penalties, default inner iterations)."""
    net = random_case(cfg)
    config = SolverConfig(adaptive=None)
    engine = ProxEngine(net, config.inner_iters, config.inner_omega, config.inner_relax)
    state = init_state(net, config)
    times = []
    for i in range(warmup + iters):
        t0 = time.perf_counter()
        state, _ = iterate(state, net, config, engine)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def scaling_ratios(N: int, T: int, K: int, iters: int = 20, out=print) -> dict:
    base = CaseConfig(num_nodes=N, horizon=T, contingencies=K, seed=1)
    t_base = time_per_iteration(base, iters)
    out(f"baseline N={N} T={T} K={K}: {1e3 * t_base:.1f} ms/iteration")
    ratios = {}
    for name, cfg in (
        ("N", CaseConfig(num_nodes=2 * N, horizon=T, contingencies=K, seed=1)),
        ("T", CaseConfig(num_nodes=N, horizon=2 * T, contingencies=K, seed=1)),
        ("K", CaseConfig(num_nodes=N, horizon=T, contingencies=2 * K, seed=1)),
    ):
        t = time_per_iteration(cfg, iters)
        ratios[name] = t / t_base
        out(f"double {name}: {1e3 * t:.1f} ms/iteration, ratio {ratios[name]:.2f}")
    return ratios


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=200)
    ap.add_argument("--horizon", type=int, default=24)
    ap.add_argument("--contingencies", type=int, default=8)
    ap.add_argument("--iters", type=int, default=20)
    args = ap.parse_args(argv)
    scaling_ratios(args.nodes, args.horizon, args.contingencies, args.iters)
    return 0


if __name__ == "__main__":
    sys.exit(main())
