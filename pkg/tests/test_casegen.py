import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix

from mpopf.casegen import CURTAIL_COST, PER_NODE, CaseConfig, random_case
from mpopf.network import DeviceKind, validate
from mpopf.oracle import solve_network


def _by_name(net):
    return {g.name: g for g in net.groups}


def test_paper_device_mix_at_500_nodes():
    net = random_case(CaseConfig(num_nodes=500, horizon=1))
    g = _by_name(net)
    assert g["load"].count == 500
    assert g["generator"].count == 1392
    assert g["ac_line"].count == 1143
    assert g["dc_line"].count == 3
    assert g["battery"].count == 74


@pytest.mark.parametrize("N", [10, 37, 120])
def test_proportions_within_rounding(N):
    g = _by_name(random_case(CaseConfig(num_nodes=N, horizon=1)))
    for name in ("generator", "ac_line", "battery"):
        count = g[name].count if name in g else 0
        assert abs(count - PER_NODE[name] * N) <= 1.0
    assert g["load"].count == N


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 4), st.integers(0, 3), st.integers(0, 10_000))
def test_generated_cases_validate_and_connect(N, T, K, seed):
    net = random_case(CaseConfig(num_nodes=N, horizon=T, contingencies=K if N > 1 else 0, seed=seed))
    assert validate(net) == []
    if N > 1:
        ends = _by_name(net)["ac_line"].terminal_node
        A = coo_matrix((np.ones(len(ends)), (ends[:, 0], ends[:, 1])), shape=(N, N))
        assert connected_components(A, directed=False)[0] == 1


def test_deterministic_per_seed():
    a = random_case(CaseConfig(num_nodes=12, contingencies=2, seed=5))
    b = random_case(CaseConfig(num_nodes=12, contingencies=2, seed=5))
    for ga, gb in zip(a.groups, b.groups):
        for k in ga.params:
            np.testing.assert_array_equal(ga.params[k], gb.params[k])


def test_curtailment_covers_demand():
    net = random_case(CaseConfig(num_nodes=8, horizon=3, seed=1))
    g = _by_name(net)
    np.testing.assert_array_equal(g["curtailment"].params["p_max"], -g["load"].params["p_load"])
    assert np.all(g["curtailment"].params["b"] == CURTAIL_COST)


@pytest.mark.parametrize("seed", range(5))
def test_feasible_at_upper_load_scale(seed):
    net = random_case(CaseConfig(num_nodes=8, horizon=2, contingencies=2, seed=seed, load_scale=0.7))
    assert solve_network(net).raw.status == "optimal"


def test_contingencies_need_lines():
    with pytest.raises(ValueError):
        random_case(CaseConfig(num_nodes=1, contingencies=1))
