"""Node average and residual operators as incidence scatter / gather.

A schedule tensor is a list with one array per device group, shaped
``(k_eff, n_devices, terminals_per_device, T)``. ``k_eff`` is ``K + 1`` for
per-contingency quantities and 1 for quantities shared by all contingencies;
shared arrays broadcast against ``K + 1`` without being copied. Node tensors
are ``(K + 1, N, T)`` (or ``(1, N, T)`` when nothing varies by contingency).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .network import Network, node_degree

ScheduleTensor = list  # list[np.ndarray], one per group


class Incidence:
    """Per-group terminal-to-node incidence matrices ``A_{l}`` (N x tau*n).

    Columns are ordered slot-major then device, so the scatter sums every node
    in the fixed order group, slot, device.
    """

    def __init__(self, net: Network):
        self.num_nodes = net.num_nodes
        self.horizon = net.horizon
        self.degree = node_degree(net)
        self.terminal_node = [g.terminal_node for g in net.groups]
        self.mats = []
        for g in net.groups:
            n, tau = g.terminal_node.shape
            cols = np.arange(n * tau)
            rows = g.terminal_node.T.ravel()  # slot-major
            self.mats.append(
                sp.csr_matrix(
                    (np.ones(n * tau), (rows, cols)), shape=(net.num_nodes, n * tau)
                )
            )
        with np.errstate(divide="ignore"):
            self.inv_degree = np.where(self.degree > 0, 1.0 / np.maximum(self.degree, 1), 0.0)

    def check(self, x: Sequence[np.ndarray]) -> None:
        if len(x) != len(self.mats):
            raise ValueError(f"expected {len(self.mats)} group arrays, got {len(x)}")
        for g, (xg, tn) in enumerate(zip(x, self.terminal_node)):
            if xg.ndim != 4 or xg.shape[1:3] != tn.shape or xg.shape[3] != self.horizon:
                raise ValueError(
                    f"group {g}: array shape {xg.shape} does not match "
                    f"(k, {tn.shape[0]}, {tn.shape[1]}, {self.horizon})"
                )


def incidence(net: Network) -> Incidence:
    inc = net.__dict__.get("_incidence")
    if inc is None:
        inc = Incidence(net)
        net.__dict__["_incidence"] = inc
    return inc


def node_sum(x: ScheduleTensor, net: Network) -> np.ndarray:
    """Scatter: total of ``x`` over the terminals of every node."""
    inc = incidence(net)
    inc.check(x)
    k_out = max(xg.shape[0] for xg in x) if x else 1
    out = np.zeros((k_out, inc.num_nodes, inc.horizon))
    for A, xg in zip(inc.mats, x):
        k, n, tau, T = xg.shape
        if n * tau == 0:
            continue
        cols = np.ascontiguousarray(xg.transpose(2, 1, 0, 3)).reshape(tau * n, k * T)
        contrib = (A @ cols).reshape(inc.num_nodes, k, T).transpose(1, 0, 2)
        out += contrib  # k == 1 broadcasts across contingencies
    return out


def node_average(x: ScheduleTensor, net: Network) -> np.ndarray:
    """Node average ``(1/|n|) sum_{j in n} x_j`` as a node tensor."""
    return node_sum(x, net) * incidence(net).inv_degree[None, :, None]


def gather_to_terminals(y: np.ndarray, net: Network) -> ScheduleTensor:
    """Adjoint of the scatter: every terminal reads its node's value."""
    inc = incidence(net)
    if y.ndim != 3 or y.shape[1:] != (inc.num_nodes, inc.horizon):
        raise ValueError(
            f"node tensor shape {y.shape} does not match (k, {inc.num_nodes}, {inc.horizon})"
        )
    return [y[:, tn] for tn in inc.terminal_node]


def node_residual(x: ScheduleTensor, avg: np.ndarray, net: Network) -> ScheduleTensor:
    """``x_j - avg_{n(j)}`` for every terminal."""
    incidence(net).check(x)
    return [xg - yg for xg, yg in zip(x, gather_to_terminals(avg, net))]


def resid(x: ScheduleTensor, net: Network) -> ScheduleTensor:
    return node_residual(x, node_average(x, net), net)


def terminal_sq_norm(y: np.ndarray, net: Network) -> float:
    """Squared norm of the terminal field obtained by gathering node tensor ``y``."""
    deg = incidence(net).degree
    return float(np.einsum("knt,n->", y * y, deg))


def sq_norm(x: ScheduleTensor) -> float:
    return float(sum(np.vdot(xg, xg) for xg in x))


def inner(x: ScheduleTensor, y: ScheduleTensor) -> float:
    """Inner product of two schedule tensors; shared arrays count once per slice of the other."""
    total = 0.0
    for xg, yg in zip(x, y):
        xb, yb = np.broadcast_arrays(xg, yg)
        total += float(np.vdot(xb, yb))
    return total


def reduce_to(x: np.ndarray, k_eff: int) -> np.ndarray:
    """Adjoint of broadcasting a ``(k_eff, ...)`` array up to ``x.shape[0]`` slices."""
    if x.shape[0] == k_eff:
        return x
    if k_eff != 1:
        raise ValueError(f"cannot reduce {x.shape[0]} slices to {k_eff}")
    return x.sum(axis=0, keepdims=True)
