import numpy as np
import pytest

from mpopf.devices import ProxEngine
from mpopf.network import DeviceKind, Network, make_group
from mpopf.oracle import solve_network
from mpopf.solver import (
    AdaptiveConfig, Residuals, SolverConfig, adapt_penalties, check_convergence, convergence_bound,
    init_state, iterate, solve,
)
from mpopf.tensor_ops import gather_to_terminals

from conftest import flatten, random_network, three_bus, toy
from shadow import ShadowAdmm


def test_zero_initial_state():
    net = three_bus()
    st = init_state(net, SolverConfig())
    assert all(not a.any() for a in st.p + st.theta + st.v)
    assert not st.u.any()
    assert (st.rho_p, st.rho_theta) == (1.0, 1.0)


def test_warm_start_copies_exactly():
    net = three_bus(battery=False)
    sol = solve(net, SolverConfig(max_iter=50))
    st = init_state(net, SolverConfig(), warm=sol)
    for a, b in zip(st.p + st.theta + st.v, sol.p + sol.theta + sol.v):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(st.u, sol.u)
    assert st.rho_p == sol.rho_p


def test_warm_start_shape_mismatch():
    sol = solve(three_bus(horizon=2, battery=False), SolverConfig(max_iter=5))
    with pytest.raises(ValueError, match="shape"):
        init_state(three_bus(horizon=3, battery=False), SolverConfig(), warm=sol)


def test_feasible_fixed_point_is_stationary():
    net = toy()
    st = init_state(net, SolverConfig(adaptive=None))
    st.p[0][...] = 4.0
    st.p[1][...] = -4.0
    st.u[...] = -1.0  # price 1 at rho_p = 1
    st.z[0][...] = 4.0
    st.z[1][...] = -4.0
    new, res = iterate(st, net, SolverConfig(adaptive=None), ProxEngine(net))
    assert res.primal == 0.0 and res.dual == 0.0
    for a, b in zip(new.p, st.p):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(new.u, st.u)


def test_toy_converges_to_analytic_solution():
    sol = solve(toy(), SolverConfig(tol=1e-8, max_iter=5000))
    assert sol.status == "converged"
    assert sol.p[0][0, 0, 0, 0] == pytest.approx(4.0, abs=1e-6)
    assert sol.objective == pytest.approx(4.0, abs=1e-6)
    assert sol.prices[0, 0, 0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_simplified_path_is_bitwise_general_path(seed):
    net = random_network(seed, num_nodes=5, contingencies=1)
    a = solve(net, SolverConfig(max_iter=200, min_iter=200))
    b = solve(net, SolverConfig(max_iter=200, min_iter=200, explicit_duplicates=True))
    for x, y in zip(a.p + a.theta, b.p + b.theta):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.u, b.u)


def test_matches_shadow_admm():
    net = random_network(5, num_nodes=4, contingencies=2, batteries=False)
    cfg = SolverConfig(adaptive=None, alpha=1.3)
    shadow = ShadowAdmm(net, alpha=1.3)
    st = init_state(net, cfg)
    eng = ProxEngine(net)
    for _ in range(100):
        st, _ = iterate(st, net, cfg, eng)
        shadow.step()
    for k in range(net.num_contingencies + 1):
        np.testing.assert_allclose(flatten(st.p, k), flatten(shadow.p, k), rtol=1e-9, atol=1e-9)
    # node prices are the terminal prices of the reference
    u_term = np.stack([flatten(gather_to_terminals(st.u[k:k + 1], net), 0) for k in range(st.u.shape[0])])
    np.testing.assert_allclose(u_term, shadow.u, atol=1e-9)


def test_convergence_bound_example():
    net = Network(1, 1, (make_group(DeviceKind.FIXED_LOAD, [0, 0], 1, p_load=0.0),))
    cfg = SolverConfig(tol=1e-3)
    assert convergence_bound(net, 1e-3) == pytest.approx(2e-3)
    assert check_convergence(Residuals(1e-3 / np.sqrt(2), 1e-3 / np.sqrt(2), 0.0, 0.0), net, cfg)
    assert check_convergence(Residuals(0.0, 0.0, 0.0, 0.0), net, SolverConfig(tol=1e-12))
    assert not check_convergence(Residuals(0.0, 0.0, 2.0001e-3, 0.0), net, cfg)


def test_adapt_penalties_examples():
    net = three_bus()
    cfg = SolverConfig()
    st = init_state(net, cfg)
    st.u[...] = 1.0
    new = adapt_penalties(st, Residuals(5.0, 1.0, 1.0, 1.0), cfg)
    assert new.rho_p == pytest.approx(1.1)
    np.testing.assert_allclose(new.u, 1.0 / 1.1)
    assert new.rho_theta == 1.0
    same = adapt_penalties(st, Residuals(1.5, 1.0, 1.0, 1.5), cfg)
    assert same is st
    down = adapt_penalties(st, Residuals(1.0, 1.0, 1.0, 5.0), cfg)
    assert down.rho_theta == pytest.approx(1 / 1.1)


def test_infeasible_case_does_not_converge():
    net = Network(1, 1, (
        make_group(DeviceKind.GENERATOR, [0], 1, a=0.0, b=1.0, p_min=0.0, p_max=1.0),
        make_group(DeviceKind.FIXED_LOAD, [0], 1, p_load=-4.0),
    ))
    sol = solve(net, SolverConfig(max_iter=2000))
    assert sol.status != "converged"
    assert sol.residuals.r_primal_p > 0.5


def test_three_bus_matches_oracle():
    net = three_bus()
    # fixed penalties: the default adaptive rule cycles on this case at tol 1e-5
    sol = solve(net, SolverConfig(tol=1e-5, max_iter=20000, adaptive=None))
    ref = solve_network(net)
    assert sol.status == "converged"
    assert abs(sol.objective - ref.objective) <= 1e-3 * abs(ref.objective)


def test_trace_rows_and_determinism():
    net = three_bus()
    cfg = SolverConfig(max_iter=40, min_iter=40, trace_every=10)
    a, b = solve(net, cfg), solve(net, cfg)
    assert [r[0] for r in a.trace] == [10, 20, 30, 40]
    assert a.trace == b.trace


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(alpha=2.0)
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(rho_p=-1.0)


def test_adaptive_default_is_paper_setting():
    cfg = SolverConfig()
    assert cfg.adaptive == AdaptiveConfig(2.0, 1.1, 10)
    assert cfg.alpha == 1.0
