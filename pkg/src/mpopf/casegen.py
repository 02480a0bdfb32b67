"""Synthetic test networks.

Device counts per node follow the mix of a large western-interconnect model
(per 500 nodes: 500 loads, 1392 generators, 1143 AC lines, 3 DC lines and 74
batteries). Topology is a random spanning tree plus extra lines, so every
network is connected. Each load node also gets a curtailment generator
(zero quadratic cost, linear cost 500, range ``[0, demand]``), which keeps
every case feasible under any line outage.

Power is in MW and costs in $/MWh, with node loads of tens of MW. Line
susceptances are O(1) per unit of angle, so phase angles live on the same
numeric scale as power flows and one penalty scale suits both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import DeviceKind, Network, build_n_minus_1, make_group

PER_NODE = {"load": 1.0, "generator": 1392 / 500, "ac_line": 1143 / 500, "dc_line": 3 / 500, "battery": 74 / 500}
CURTAIL_COST = 500.0


@dataclass(frozen=True)
class CaseConfig:
    num_nodes: int = 10
    horizon: int = 4
    contingencies: int = 0
    seed: int = 0
    batteries: bool = True
    curtailment: bool = True
    load_scale: float = 0.6


def _count(name: str, N: int) -> int:
    return int(round(PER_NODE[name] * N))


def random_case(cfg: CaseConfig) -> Network:
    rng = np.random.default_rng(cfg.seed)
    N, T = cfg.num_nodes, cfg.horizon
    if N < 1 or T < 1:
        raise ValueError("need at least one node and one time period")
    groups = []

    # topology: random spanning tree, then extra lines between distinct nodes
    n_ac = max(_count("ac_line", N), N - 1)
    order = rng.permutation(N)
    ends = [(order[i], order[rng.integers(0, i)]) for i in range(1, N)]
    while len(ends) < n_ac and N > 1:
        i, j = rng.choice(N, size=2, replace=False)
        ends.append((i, j))
    ac_line_group = None
    if ends:
        ends_arr = np.array(ends, dtype=np.int64)
        m = len(ends_arr)
        ac_line_group = len(groups)
        groups.append(make_group(
            DeviceKind.AC_LINE, ends_arr, T, name="ac_line",
            u=rng.uniform(30.0, 120.0, m), b=rng.uniform(0.5, 2.0, m),
        ))

    n_dc = _count("dc_line", N)
    if n_dc and N > 1:
        ends_dc = np.array([rng.choice(N, size=2, replace=False) for _ in range(n_dc)])
        groups.append(make_group(DeviceKind.DC_LINE, ends_dc, T, name="dc_line", u=rng.uniform(30.0, 120.0, n_dc)))

    # loads: one per node with a daily-ish shape
    t = np.arange(T)
    shape = 1.0 + 0.3 * np.sin(2 * np.pi * (t / max(T, 1)) + rng.uniform(0, 2 * np.pi, (N, 1)))
    nominal = rng.uniform(20.0, 80.0, (N, 1)) * shape
    demand = cfg.load_scale * nominal
    groups.append(make_group(DeviceKind.FIXED_LOAD, np.arange(N), T, name="load", p_load=-demand))

    n_gen = max(_count("generator", N), 1)
    gen_nodes = rng.integers(0, N, n_gen)
    p_max = rng.uniform(15.0, 80.0, n_gen)
    # capacity is sized against nominal demand, so scaled-down loads leave headroom
    p_max *= max(1.0, 1.3 * nominal.sum(axis=0).max() / p_max.sum())
    groups.append(make_group(
        DeviceKind.GENERATOR, gen_nodes, T, name="generator",
        a=rng.uniform(0.0, 0.05, n_gen), b=rng.uniform(5.0, 50.0, n_gen),
        p_min=0.0, p_max=np.repeat(p_max[:, None], T, axis=1),
    ))

    if cfg.curtailment:
        groups.append(make_group(
            DeviceKind.GENERATOR, np.arange(N), T, name="curtailment",
            a=0.0, b=CURTAIL_COST, p_min=0.0, p_max=demand,
        ))

    n_bat = _count("battery", N) if cfg.batteries else 0
    if n_bat:
        groups.append(make_group(
            DeviceKind.BATTERY, rng.integers(0, N, n_bat), T, name="battery",
            alpha=rng.uniform(0.0, 5.0, n_bat), beta=rng.uniform(0.8, 1.0, n_bat),
            power=rng.uniform(10.0, 50.0, n_bat), duration=rng.uniform(1.0, 4.0, n_bat),
        ))

    net = Network(N, T, groups)
    K = cfg.contingencies
    if K:
        if ac_line_group is None:
            raise ValueError("contingencies need at least one AC line")
        m = groups[ac_line_group].count
        out = rng.choice(m, size=min(K, m), replace=False)
        net = net.with_contingencies(build_n_minus_1(net, out.tolist(), group=ac_line_group))
    return net


def corpus(count: int = 20, seed: int = 2024) -> list[CaseConfig]:
    """Desk-scale benchmark corpus: N in [3, 10], T in [1, 4], K in [0, 3]."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        N = int(rng.integers(3, 11))
        T = int(rng.integers(1, 5))
        K = int(rng.integers(0, 4))
        out.append(CaseConfig(num_nodes=N, horizon=T, contingencies=K, seed=100 + i))
    return out
