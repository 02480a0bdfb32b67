"""Proximal message passing for contingency-constrained dispatch.

Each outer iteration evaluates every device prox against node messages, then
forms node averages and residuals and updates the scaled prices. The
contingency group keeps one schedule per contingency; every other group keeps
a single schedule whose prox target averages over contingencies.

Storage. ``u`` is node-constant and kept as a node tensor ``(K+1, N, T)``.
``v`` has zero node average, so it is kept per terminal. The duplicate
variables are ``z`` (per terminal, zero node average) and ``xi`` (node
tensor); with ``alpha = 1`` they coincide with the projections of the last
prox outputs, which is all the plain message passing path stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .devices import INNER_RELAX, ProxEngine, cost
from .network import Network
from .tensor_ops import gather_to_terminals, node_average, sq_norm, terminal_sq_norm

TRACE_FIELDS = (
    "iter", "r_primal_p", "r_primal_theta", "r_dual_p", "r_dual_theta", "rho_p", "rho_theta", "objective",
)


@dataclass(frozen=True)
class AdaptiveConfig:
    mu: float = 2.0
    gamma: float = 1.1
    every: int = 10


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-3
    max_iter: int = 10_000
    min_iter: int = 0
    rho_p: float = 1.0
    rho_theta: float = 1.0
    alpha: float = 1.0
    adaptive: AdaptiveConfig | None = field(default_factory=AdaptiveConfig)
    inner_iters: int = 10
    inner_omega: float | None = None  # None: OMEGA_SCALE * rho_p
    inner_relax: float = INNER_RELAX
    inner_warm: bool = True
    trace_every: int = 1
    explicit_duplicates: bool = False  # run the (z, xi) path even at alpha = 1
    diverge_at: float = 1e9

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 1.0 <= self.alpha < 2.0:
            raise ValueError("alpha must lie in [1, 2)")
        if min(self.rho_p, self.rho_theta) <= 0:
            raise ValueError("penalties must be positive")
        if self.max_iter < 0 or self.min_iter < 0:
            raise ValueError("iteration limits must be nonnegative")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")


@dataclass
class Residuals:
    r_primal_p: float
    r_primal_theta: float
    r_dual_p: float
    r_dual_theta: float

    @property
    def primal(self) -> float:
        return math.hypot(self.r_primal_p, self.r_primal_theta)

    @property
    def dual(self) -> float:
        return math.hypot(self.r_dual_p, self.r_dual_theta)


@dataclass
class SolverState:
    p: list  # per group (k_eff, n, tau, T)
    theta: list
    u: np.ndarray  # (K+1, N, T)
    v: list  # per group (K+1, n, tau, T)
    z: list  # per group (K+1, n, tau, T), zero node average
    xi: np.ndarray  # (K+1, N, T)
    rho_p: float
    rho_theta: float
    iter: int = 0

    def copy(self) -> "SolverState":
        return SolverState(
            [a.copy() for a in self.p], [a.copy() for a in self.theta], self.u.copy(),
            [a.copy() for a in self.v], [a.copy() for a in self.z], self.xi.copy(),
            self.rho_p, self.rho_theta, self.iter,
        )


@dataclass
class Solution:
    p: list
    theta: list
    u: np.ndarray
    v: list
    rho_p: float
    rho_theta: float
    objective: float
    status: str  # "converged", "max_iter", "diverged"
    iterations: int
    residuals: Residuals | None
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def prices(self) -> np.ndarray:
        """Node prices of power balance, ``(K+1, N, T)``."""
        return -self.rho_p * self.u

    def state(self) -> SolverState:
        return _state_from(self.p, self.theta, self.u, self.v, self.rho_p, self.rho_theta, None)


def _schedule_shapes(net: Network) -> list[tuple[int, ...]]:
    return [
        (net.k_eff(g), grp.count, grp.terminals_per_device, net.horizon)
        for g, grp in enumerate(net.groups)
    ]


def _state_from(p, theta, u, v, rho_p, rho_theta, net: Network | None) -> SolverState:
    p = [np.array(a, dtype=float) for a in p]
    theta = [np.array(a, dtype=float) for a in theta]
    if net is None:
        return SolverState(p, theta, np.array(u, float), [np.array(a, float) for a in v], [], np.zeros(0), rho_p, rho_theta)
    pbar = node_average(p, net)
    K1 = net.num_contingencies + 1
    pbar = np.broadcast_to(pbar, (K1,) + pbar.shape[1:])
    z = [np.broadcast_to(pg - gg, (K1,) + pg.shape[1:]).copy() for pg, gg in zip(p, gather_to_terminals(pbar, net))]
    xi = np.broadcast_to(node_average(theta, net), pbar.shape).copy()
    return SolverState(
        p, theta, np.array(u, float), [np.array(a, float) for a in v], z, xi, float(rho_p), float(rho_theta)
    )


def init_state(net: Network, config: SolverConfig, warm=None) -> SolverState:
    """Zero state, or a copy of ``warm`` (a :class:`Solution` or :class:`SolverState`)."""
    K1 = net.num_contingencies + 1
    shapes = _schedule_shapes(net)
    node_shape = (K1, net.num_nodes, net.horizon)
    if warm is None:
        p = [np.zeros(s) for s in shapes]
        theta = [np.zeros(s) for s in shapes]
        v = [np.zeros((K1,) + s[1:]) for s in shapes]
        return _state_from(p, theta, np.zeros(node_shape), v, config.rho_p, config.rho_theta, net)
    if len(warm.p) != len(shapes):
        raise ValueError(f"warm start has {len(warm.p)} groups, network has {len(shapes)}")
    for g, s in enumerate(shapes):
        for name, arr, want in (("p", warm.p[g], s), ("theta", warm.theta[g], s), ("v", warm.v[g], (K1,) + s[1:])):
            if np.shape(arr) != want:
                raise ValueError(f"warm start {name}[{g}] has shape {np.shape(arr)}, expected {want}")
    if np.shape(warm.u) != node_shape:
        raise ValueError(f"warm start u has shape {np.shape(warm.u)}, expected {node_shape}")
    return _state_from(warm.p, warm.theta, warm.u, warm.v, warm.rho_p, warm.rho_theta, net)


def prox_targets(state: SolverState, net: Network) -> tuple[list, list]:
    """Prox targets per group; groups without contingencies average over ``k``."""
    ug = gather_to_terminals(state.u, net)
    xg = gather_to_terminals(state.xi, net)
    tx, ty = [], []
    for g in range(len(net.groups)):
        a = state.z[g] - ug[g]
        b = xg[g] - state.v[g]
        if net.k_eff(g) == 1:
            a = a.mean(axis=0, keepdims=True)
            b = b.mean(axis=0, keepdims=True)
        tx.append(a)
        ty.append(b)
    return tx, ty


def iterate(state: SolverState, net: Network, config: SolverConfig, engine: ProxEngine) -> tuple[SolverState, Residuals]:
    """One outer iteration; returns the new state and its residuals."""
    K1 = net.num_contingencies + 1
    # the contingency cost carries weight 1/(K+1), so every group's prox runs at (K+1) rho
    rp, rt = K1 * state.rho_p, K1 * state.rho_theta
    tx, ty = prox_targets(state, net)
    p_new, th_new = [], []
    for g in range(len(net.groups)):
        pg, tg = engine.prox(g, tx[g], ty[g], rp, rt)
        p_new.append(pg)
        th_new.append(tg)

    node_shape = (K1, net.num_nodes, net.horizon)
    pbar = np.broadcast_to(node_average(p_new, net), node_shape)
    thbar = np.broadcast_to(node_average(th_new, net), node_shape)
    pg_bar = gather_to_terminals(pbar, net)
    tg_bar = gather_to_terminals(thbar, net)
    p_res = [pg - gb for pg, gb in zip(p_new, pg_bar)]
    th_res = [tg - gb for tg, gb in zip(th_new, tg_bar)]

    a = config.alpha
    if a == 1.0 and not config.explicit_duplicates:
        z = [np.broadcast_to(r, (K1,) + r.shape[1:]).copy() for r in p_res]
        xi = thbar.copy()
        u = state.u + pbar
        v = [vg + r for vg, r in zip(state.v, th_res)]
    else:
        z = [a * r + (1.0 - a) * zo for r, zo in zip(p_res, state.z)]
        xi = a * thbar + (1.0 - a) * state.xi
        u = state.u + a * pbar
        v = [vg + a * r for vg, r in zip(state.v, th_res)]

    dz = [zn - zo for zn, zo in zip(z, state.z)]
    res = Residuals(
        r_primal_p=math.sqrt(terminal_sq_norm(pbar, net)),
        r_primal_theta=math.sqrt(sq_norm([np.broadcast_to(r, (K1,) + r.shape[1:]) for r in th_res])),
        r_dual_p=state.rho_p * math.sqrt(sq_norm(dz)),
        r_dual_theta=state.rho_theta * math.sqrt(terminal_sq_norm(xi - state.xi, net)),
    )
    new = SolverState(p_new, th_new, u, v, z, xi, state.rho_p, state.rho_theta, state.iter + 1)
    return new, res


def convergence_bound(net: Network, tol: float) -> float:
    return tol * math.sqrt(2 * net.num_terminals * net.horizon * (net.num_contingencies + 1))


def check_convergence(res: Residuals, net: Network, config: SolverConfig) -> bool:
    return max(res.primal, res.dual) <= convergence_bound(net, config.tol)


def adapt_penalties(state: SolverState, res: Residuals, config: SolverConfig) -> SolverState:
    """Residual-balancing update of ``rho_p`` and ``rho_theta`` with dual rescaling."""
    ad = config.adaptive
    if ad is None:
        return state

    def rule(rho, r_pri, r_dual):
        if r_pri > ad.mu * r_dual:
            return rho * ad.gamma
        if r_dual > ad.mu * r_pri:
            return rho / ad.gamma
        return rho

    rho_p = rule(state.rho_p, res.r_primal_p, res.r_dual_p)
    rho_t = rule(state.rho_theta, res.r_primal_theta, res.r_dual_theta)
    if rho_p == state.rho_p and rho_t == state.rho_theta:
        return state
    u = state.u * (state.rho_p / rho_p) if rho_p != state.rho_p else state.u
    v = [vg * (state.rho_theta / rho_t) for vg in state.v] if rho_t != state.rho_theta else state.v
    return replace(state, u=u, v=v, rho_p=rho_p, rho_theta=rho_t)


def objective(net: Network, p: list, theta: list, engine: ProxEngine | None = None) -> float:
    """Total cost with contingency-group costs averaged over contingencies.

    QP-backed groups report the inner objective at their latest inner iterate
    when ``engine`` holds one; otherwise the tolerance-relaxed minimum.
    """
    total = 0.0
    for g, group in enumerate(net.groups):
        c = engine.local_cost(g) if engine is not None and g in engine.workspaces else None
        if c is None:
            c = cost(group.kind, net.group_params(g), p[g], theta[g])
        total += float(np.sum(c)) / c.shape[0]
    return total


def solve(net: Network, config: SolverConfig | None = None, warm=None, engine: ProxEngine | None = None) -> Solution:
    """Iterate to the residual tolerance or ``max_iter``."""
    config = config or SolverConfig()
    if engine is None:
        engine = ProxEngine(
            net, config.inner_iters, config.inner_omega, config.inner_relax, config.inner_warm
        )
    state = init_state(net, config, warm)
    bound = convergence_bound(net, config.tol)
    trace: list[tuple] = []
    res = None
    status, message = "max_iter", ""
    rms_scale = math.sqrt(2 * net.num_terminals * net.horizon * (net.num_contingencies + 1))
    ad = config.adaptive
    for i in range(1, config.max_iter + 1):
        state, res = iterate(state, net, config, engine)
        worst = max(res.primal, res.dual)
        done = worst <= bound and i >= config.min_iter
        bad = not math.isfinite(worst) or worst / rms_scale > config.diverge_at
        # the final state is in the Solution itself, so the trace stays on the trace_every grid
        if i % config.trace_every == 0:
            obj = objective(net, state.p, state.theta, engine) if not bad else float("nan")
            trace.append((i, res.r_primal_p, res.r_primal_theta, res.r_dual_p, res.r_dual_theta,
                          state.rho_p, state.rho_theta, obj))
        if bad:
            status = "diverged"
            message = f"residual RMS {worst / rms_scale:.3g} at iteration {i}"
            break
        if done:
            status = "converged"
            break
        if ad is not None and i % ad.every == 0:
            state = adapt_penalties(state, res, config)
    obj = objective(net, state.p, state.theta, engine) if status != "diverged" else float("nan")
    return Solution(
        state.p, state.theta, state.u, state.v, state.rho_p, state.rho_theta, obj, status,
        state.iter, res, trace, message,
    )
