"""Shared fixtures and independent reference implementations for the tests."""

from __future__ import annotations

import numpy as np
import pytest

from mpopf.casegen import CaseConfig, corpus, random_case
from mpopf.network import DeviceKind, Network, build_n_minus_1, make_group


def three_bus(horizon: int = 2, battery: bool = True) -> Network:
    """Three buses joined by three lines; node degrees (4, 3, 4), 11 terminals, 8 devices."""
    T = horizon
    groups = [
        make_group(DeviceKind.GENERATOR, [0, 2], T, name="gen", a=[0.02, 0.05], b=[10.0, 30.0], p_min=0.0, p_max=[[60.0], [80.0]]),
        make_group(DeviceKind.FIXED_LOAD, [0, 1], T, name="load", p_load=[[-20.0] * T, [-35.0] * T]),
        make_group(DeviceKind.AC_LINE, [[0, 1], [0, 2], [1, 2]], T, name="line", u=[30.0, 50.0, 50.0], b=[1.0, 1.5, 0.8]),
    ]
    if battery:
        groups.append(make_group(DeviceKind.BATTERY, [2], T, name="battery", alpha=0.5, beta=0.95, power=10.0, duration=2.0))
    else:
        groups.append(make_group(DeviceKind.GENERATOR, [2], T, name="peaker", a=0.0, b=80.0, p_min=0.0, p_max=20.0))
    return Network(3, T, tuple(groups), declared_terminals=11)


def toy(p_load: float = -4.0) -> Network:
    """One node, one generator (a=0, b=1, p in [0, 10]) and one fixed load."""
    return Network(1, 1, (
        make_group(DeviceKind.GENERATOR, [0], 1, a=0.0, b=1.0, p_min=0.0, p_max=10.0),
        make_group(DeviceKind.FIXED_LOAD, [0], 1, p_load=p_load),
    ))


def two_generator_toy(p_max_cheap: float = 3.0) -> Network:
    """One node, a cheap generator with binding capacity and an expensive one."""
    return Network(1, 1, (
        make_group(DeviceKind.GENERATOR, [0, 0], 1, a=0.0, b=[1.0, 5.0], p_min=0.0, p_max=[[p_max_cheap], [10.0]]),
        make_group(DeviceKind.FIXED_LOAD, [0], 1, p_load=-4.0),
    ))


def five_line_radial(drop_radial: bool = False) -> Network:
    """Mesh of four nodes plus a radial node 4 fed by line 4; node 4 has a small local generator.

    ``drop_radial`` removes line 4 from the topology altogether.
    """
    T = 2
    ends = [[0, 1], [1, 2], [2, 3], [3, 0], [3, 4]]
    u = [80.0, 80.0, 80.0, 80.0, 60.0]
    b = [1.0, 1.2, 0.9, 1.1, 1.0]
    keep = 4 if drop_radial else 5
    return Network(5, T, (
        make_group(DeviceKind.AC_LINE, ends[:keep], T, name="line", u=u[:keep], b=b[:keep]),
        make_group(DeviceKind.FIXED_LOAD, [1, 2, 4], T, name="load", p_load=[[-30.0, -35.0], [-25.0, -20.0], [-30.0, -40.0]]),
        make_group(DeviceKind.GENERATOR, [0, 2], T, name="gen", a=[0.01, 0.02], b=[10.0, 20.0], p_min=0.0, p_max=[120.0, 60.0]),
        make_group(DeviceKind.GENERATOR, [4], T, name="local", a=0.0, b=60.0, p_min=0.0, p_max=25.0),
        make_group(DeviceKind.GENERATOR, [0, 1, 2, 3, 4], T, name="curtailment", a=0.0, b=500.0, p_min=0.0,
                   p_max=[[0.0, 0.0], [30.0, 35.0], [25.0, 20.0], [0.0, 0.0], [30.0, 40.0]]),
    ))


def random_network(seed: int, num_nodes: int | None = None, contingencies: int | None = None, **kw) -> Network:
    rng = np.random.default_rng(seed)
    N = num_nodes if num_nodes is not None else int(rng.integers(1, 21))
    K = contingencies if contingencies is not None else int(rng.integers(0, 4))
    T = int(rng.integers(1, 4))
    return random_case(CaseConfig(num_nodes=N, horizon=T, contingencies=K if N > 1 else 0, seed=seed, **kw))


def corpus_configs(count: int = 20, seed: int = 2024) -> list[CaseConfig]:
    """The acceptance corpus (see ``casegen.corpus``)."""
    return corpus(count, seed)


# -- independent references -------------------------------------------------------


def incidence_matrix(net: Network) -> np.ndarray:
    """Dense node-terminal incidence ``L`` over terminals ordered group, device, slot."""
    tn = np.concatenate([g.terminal_node.ravel() for g in net.groups])
    L = np.zeros((net.num_nodes, tn.size))
    L[tn, np.arange(tn.size)] = 1.0
    return L


def dense_average_matrix(net: Network) -> np.ndarray:
    """``A = L^T diag(|n|)^{-1} L``."""
    L = incidence_matrix(net)
    return L.T @ np.diag(1.0 / L.sum(axis=1)) @ L


def flatten(x: list, k: int) -> np.ndarray:
    """Slice ``k`` of a schedule tensor as a ``(J, T)`` matrix."""
    rows = []
    for xg in x:
        s = xg[min(k, xg.shape[0] - 1)]
        rows.append(s.reshape(-1, s.shape[-1]))
    return np.concatenate(rows)


def random_schedule(net: Network, rng, k: int | None = None) -> list:
    K1 = net.num_contingencies + 1 if k is None else k
    return [rng.normal(size=(K1, g.count, g.terminals_per_device, net.horizon)) for g in net.groups]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fig1():
    return three_bus()


__all__ = [
    "build_n_minus_1",
    "corpus_configs",
    "dense_average_matrix",
    "five_line_radial",
    "flatten",
    "incidence_matrix",
    "random_network",
    "random_schedule",
    "three_bus",
    "toy",
    "two_generator_toy",
]


# -- generic minimizer (cvxpy + Clarabel, tight tolerances) -------------------------

CLARABEL_TIGHT = dict(tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, max_iter=200)


def cvx_solve(problem):
    import cvxpy as cp

    try:
        problem.solve(solver=cp.CLARABEL, **CLARABEL_TIGHT)
    except cp.error.SolverError:
        # tight tolerances occasionally break down numerically; retry on a fresh copy (a failed
        # problem object does not recover) and let the KKT polish restore precision
        problem = cp.Problem(problem.objective, problem.constraints)
        problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    assert problem.status in ("optimal", "optimal_inaccurate"), problem.status
    return problem


def cvx_prox_generator(a, b, p_min, p_max, x, rho):
    import cvxpy as cp

    p = cp.Variable(x.shape)
    obj = a * cp.sum_squares(p) + b * cp.sum(p) + rho / 2 * cp.sum_squares(p - x)
    cvx_solve(cp.Problem(cp.Minimize(obj), [p >= p_min, p <= p_max]))
    return p.value


def cvx_prox_line(u, b, x1, x2, y1, y2, rho_p, rho_t, ac=True):
    import cvxpy as cp

    p1, p2, t1, t2 = (cp.Variable(x1.shape) for _ in range(4))
    obj = rho_p / 2 * (cp.sum_squares(p1 - x1) + cp.sum_squares(p2 - x2)) + rho_t / 2 * (
        cp.sum_squares(t1 - y1) + cp.sum_squares(t2 - y2))
    cons = [p1 + p2 == 0, p2 <= u, p2 >= -u]
    if ac:
        cons.append(p2 == b * (t1 - t2))
    cvx_solve(cp.Problem(cp.Minimize(obj), cons))
    return p1.value, p2.value, t1.value, t2.value


def polished_qp(P, q, A, b, G, h):
    """``min x'Px/2 + q'x  s.t.  Ax = b, Gx <= h`` by Clarabel, then an active-set polish.

    The polish solves the KKT system with the inequalities Clarabel reports as
    active held as equalities; it is kept only when the result is primal
    feasible and its multipliers are nonnegative, which certifies optimality.
    """
    import cvxpy as cp

    n = P.shape[0]
    x = cp.Variable(n)
    eq = [A @ x == b] if A.shape[0] else []
    ineq = [G @ x <= h] if G.shape[0] else []
    cvx_solve(cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(P)) + q @ x), eq + ineq))
    x0 = x.value
    z0 = ineq[0].dual_value if ineq else np.zeros(0)
    slack = h - G @ x0
    act = z0 > slack
    Ga = G[act]
    m_e, m_a = A.shape[0], Ga.shape[0]
    K = np.block([
        [P, A.T, Ga.T],
        [A, np.zeros((m_e, m_e + m_a))],
        [Ga, np.zeros((m_a, m_e + m_a))],
    ])
    rhs = np.concatenate([-q, b, h[act]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    x1, za = sol[:n], sol[n + m_e:]
    scale = max(1.0, np.abs(h).max(initial=0.0), np.abs(b).max(initial=0.0))
    kkt = np.abs(K @ sol - rhs).max()
    ok = kkt <= 1e-11 * scale and np.all(G @ x1 <= h + 1e-11 * scale) and np.all(za >= -1e-11 * scale)
    return x1 if ok else x0


def cvx_prox_battery(alpha, beta, power, duration, x, rho):
    """Storage prox written from the device description, independent of the QP encoding.

    Variables are charge ``c``, discharge ``d`` (T each) and state of charge ``s`` (T+1).
    """
    x = np.asarray(x, dtype=float)
    T = x.size
    n = 3 * T + 1
    c, d, s = np.arange(T), T + np.arange(T), 2 * T + np.arange(T + 1)
    # (rho/2)||d - c - x||^2 + alpha sum(d)
    D = np.zeros((T, n))
    D[np.arange(T), d] = 1.0
    D[np.arange(T), c] = -1.0
    P = rho * D.T @ D
    q = -rho * D.T @ x
    q[d] += alpha
    A = np.zeros((T + 2, n))
    A[np.arange(T), s[1:]] = 1.0
    A[np.arange(T), s[:-1]] = -1.0
    A[np.arange(T), c] = -beta
    A[np.arange(T), d] = 1.0
    A[T, s[0]] = 1.0
    A[T + 1, s[T]] = 1.0
    b = np.zeros(T + 2)
    G = np.concatenate([-np.eye(n), np.eye(n)[: 2 * T], np.eye(n)[s]])
    h = np.concatenate([np.zeros(n), np.full(2 * T, power), np.full(T + 1, duration * power)])
    z = polished_qp(P, q, A, b, G, h)
    return z[d] - z[c]


# -- acceptance report ----------------------------------------------------------------

ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
