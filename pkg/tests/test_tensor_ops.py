import numpy as np
from hypothesis import given, settings, strategies as st

from mpopf.network import DeviceKind, Network, make_group
from mpopf.tensor_ops import gather_to_terminals, inner, node_average, node_residual, node_sum, reduce_to, resid, terminal_sq_norm

from conftest import dense_average_matrix, flatten, incidence_matrix, random_network, random_schedule, three_bus


def _two_terminal_node():
    return Network(1, 1, (make_group(DeviceKind.FIXED_LOAD, [0, 0], 1, p_load=0.0),))


def test_average_of_two_terminals():
    net = _two_terminal_node()
    x = [np.array([1.0, 3.0]).reshape(1, 2, 1, 1)]
    assert node_average(x, net).ravel().tolist() == [2.0]
    assert resid(x, net)[0].ravel().tolist() == [-1.0, 1.0]


def test_zero_in_zero_out():
    net = three_bus()
    x = [np.zeros((1, g.count, g.terminals_per_device, net.horizon)) for g in net.groups]
    assert not node_average(x, net).any()
    assert not any(r.any() for r in resid(x, net))
    assert not any(g.any() for g in gather_to_terminals(np.zeros((1, 3, net.horizon)), net))


def test_gather_reads_node_value():
    net = three_bus()
    y = np.zeros((1, 3, net.horizon))
    y[0, 1] = 7.0
    for grp, tg in zip(net.groups, gather_to_terminals(y, net)):
        np.testing.assert_array_equal(tg[0] == 7.0, np.broadcast_to((grp.terminal_node == 1)[..., None], tg[0].shape))


def test_constant_per_node_has_zero_residual(rng):
    net = three_bus()
    z = gather_to_terminals(rng.normal(size=(1, 3, net.horizon)), net)
    assert max(np.abs(r).max() for r in resid(z, net)) < 1e-14


def test_matches_dense_oracle(rng):
    net = three_bus()
    A = dense_average_matrix(net)
    x = random_schedule(net, rng)
    avg = flatten(gather_to_terminals(node_average(x, net), net), 0)
    np.testing.assert_allclose(avg, A @ flatten(x, 0), rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(flatten(resid(x, net), 0), (np.eye(A.shape[0]) - A) @ flatten(x, 0), atol=1e-13)


def test_adjoint_identity(rng):
    net = three_bus()
    x = random_schedule(net, rng)
    y = rng.normal(size=(1, 3, net.horizon))
    lhs = float(np.vdot(node_sum(x, net), y))
    rhs = inner(x, gather_to_terminals(y, net))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_shared_groups_broadcast_over_contingencies(rng):
    net = random_network(3, num_nodes=6, contingencies=2)
    K1 = net.num_contingencies + 1
    x = [rng.normal(size=(net.k_eff(g), grp.count, grp.terminals_per_device, net.horizon)) for g, grp in enumerate(net.groups)]
    avg = node_average(x, net)
    assert avg.shape == (K1, net.num_nodes, net.horizon)
    L = incidence_matrix(net)
    for k in range(K1):
        np.testing.assert_allclose(avg[k], (L @ flatten(x, k)) / L.sum(axis=1)[:, None], rtol=1e-12)


def test_reduce_to_is_broadcast_adjoint(rng):
    a = rng.normal(size=(1, 3, 2))
    b = rng.normal(size=(4, 3, 2))
    assert np.isclose(np.vdot(np.broadcast_to(a, b.shape), b), np.vdot(a, reduce_to(b, 1)))


def test_terminal_norm_counts_degree(rng):
    net = three_bus()
    y = rng.normal(size=(1, 3, net.horizon))
    direct = sum(float(np.vdot(g, g)) for g in gather_to_terminals(y, net))
    assert np.isclose(terminal_sq_norm(y, net), direct)


def _rel(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(b).max())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_operator_identities(seed):
    """Idempotence, cancellation, orthogonality and linearity on random networks."""
    rng = np.random.default_rng(seed)
    net = random_network(seed)
    x = random_schedule(net, rng)
    y = random_schedule(net, rng)
    a, b = rng.normal(size=2)
    avg = node_average(x, net)
    # idempotence
    assert _rel(node_average(gather_to_terminals(avg, net), net), avg) <= 1e-12
    rx = resid(x, net)
    for r1, r2 in zip(resid(rx, net), rx):
        assert _rel(r1, r2) <= 1e-12
    # residual has zero average
    assert np.abs(node_average(rx, net)).max() <= 1e-12 * max(1.0, np.abs(avg).max())
    # orthogonality of the average and residual parts
    ip = inner(gather_to_terminals(avg, net), rx)
    scale = np.sqrt(inner(x, x)) ** 2
    assert abs(ip) <= 1e-12 * scale
    # cancellation: x = gather(avg) + resid
    for xg, ag, rg in zip(x, gather_to_terminals(avg, net), rx):
        assert _rel(ag + rg, xg) <= 1e-12
    # linearity
    comb = [a * xg + b * yg for xg, yg in zip(x, y)]
    assert _rel(node_average(comb, net), a * avg + b * node_average(y, net)) <= 1e-12
    for r, r1, r2 in zip(resid(comb, net), rx, resid(y, net)):
        assert _rel(r, a * r1 + b * r2) <= 1e-12
    # node_residual agrees with resid
    for r1, r2 in zip(node_residual(x, avg, net), rx):
        assert _rel(r1, r2) == 0.0
