"""Reference solution of the full contingency problem as one convex QP.

Every device constraint, node balance and phase consistency row is written
out explicitly and the whole problem goes to the interior-point solver in
:mod:`mpopf.ipm`. Groups without contingencies get a single set of variables
that appears in every contingency's node rows, which is how the tying
constraints are encoded. The code shares nothing with the message passing
path beyond the network description.

Node balance rows carry elastic slacks ``e+ - e-`` with an exact penalty
``M`` far above any price. A node cut off by an outage with nothing but
curtailment leaves no strictly feasible point (and an unbounded price set),
which stalls an interior-point method; the slacks restore a strict interior
without moving the optimum, and their total at the solution doubles as a
feasibility certificate. Two-sided limits that pin a variable (an outaged
line's ``u = 0``, a generator with ``p_min = p_max``) become equalities.

Sign convention: the Lagrangian is ``f + y'(Ax - b) + z'(Gx - h)``. A node's
balance row dual ``y`` is minus its price, and the derivative of the optimal
value with respect to a right-hand side is ``-y`` (equality) or ``-z``
(inequality); for generator capacity ``d f*/d p_max = -z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .devices import qp_form
from .ipm import QpResult, feasibility_gap, solve_qp
from .network import DeviceKind, Network

FEAS_GAP_TOL = 1e-6
ELASTIC_FACTOR = 100.0


def _scale(net: Network) -> float:
    """Largest parameter magnitude that can multiply a quadratic cost coefficient."""
    vals = [1.0]
    for g in range(len(net.groups)):
        for name in ("p_max", "p_min", "power"):
            v = net.group_params(g).get(name)
            if v is not None and v.size:
                vals.append(float(np.abs(v).max()))
    return max(vals)


def _split_rows(ineq: "_Rows", eq: "_Rows | None", cols, coef, rhs, pin, shape):
    """Add ``coef * x <= rhs`` rows; pinned ones go to ``eq`` (or are dropped when ``eq`` is None).

    Returns ``(ineq_ids, eq_ids)`` shaped ``shape`` with ``-1`` where a row
    lives in the other system or was dropped.
    """
    ineq_ids = np.full(pin.size, -1, dtype=np.int64)
    eq_ids = np.full(pin.size, -1, dtype=np.int64)
    free = ~pin
    if free.any():
        ineq_ids[free] = ineq.add(cols[free], coef, rhs[free])
    if pin.any() and eq is not None:
        eq_ids[pin] = eq.add(cols[pin], coef, rhs[pin])
    return ineq_ids.reshape(shape), eq_ids.reshape(shape)


class InfeasibleError(RuntimeError):
    def __init__(self, gap: float):
        super().__init__(f"problem is infeasible: least total constraint violation {gap:.3g}")
        self.gap = gap


class _Rows:
    """Accumulates sparse constraint rows ``sum coef * x[idx] (=|<=) rhs``."""

    def __init__(self):
        self.r, self.c, self.v, self.rhs = [], [], [], []
        self.count = 0

    def add(self, cols: np.ndarray, coefs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Rows given by ``cols``/``coefs`` of shape ``(rows, terms)``; returns row ids."""
        cols = np.atleast_2d(cols)
        coefs = np.broadcast_to(coefs, cols.shape)
        nrow = cols.shape[0]
        ids = self.count + np.arange(nrow)
        self.r.append(np.repeat(ids, cols.shape[1]))
        self.c.append(cols.ravel())
        self.v.append(np.asarray(coefs, float).ravel())
        self.rhs.append(np.broadcast_to(np.asarray(rhs, float), (nrow,)).ravel())
        self.count += nrow
        return ids

    def matrix(self, n: int):
        if not self.count:
            return sp.csr_matrix((0, n)), np.zeros(0)
        M = sp.csr_matrix(
            (np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=(self.count, n)
        )
        return M, np.concatenate(self.rhs)


@dataclass
class MonolithicQp:
    """``min (1/2) x'Px + c'x  s.t.  Ax = b, Gx <= h`` plus index maps."""

    P: sp.csr_matrix
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    p_idx: list  # per group (k_eff, n, tau, T) variable ids
    theta_idx: list
    s_idx: list  # per group (k_eff, n, mu) or None
    balance_rows: np.ndarray  # (K+1, N, T)
    elastic_idx: np.ndarray  # (2, K+1, N, T) ids of e+ and e-
    penalty: float
    eq_rows: dict = field(default_factory=dict)  # (g, name) -> row ids
    ineq_rows: dict = field(default_factory=dict)  # -1 marks rows held elsewhere

    @property
    def num_vars(self) -> int:
        return self.c.size

    @property
    def num_device_vars(self) -> int:
        return self.c.size - self.elastic_idx.size

    def violation(self, x: np.ndarray) -> float:
        return float(x[self.elastic_idx].sum())


@dataclass
class OracleResult:
    p: list
    theta: list
    objective: float
    qp: MonolithicQp
    raw: QpResult

    @property
    def prices(self) -> np.ndarray:
        """Node prices of power balance, ``(K+1, N, T)``."""
        return -self.raw.y[self.qp.balance_rows]


def assemble(net: Network) -> MonolithicQp:
    K1 = net.num_contingencies + 1
    T = net.horizon
    nvar = 0
    p_idx, th_idx, s_idx = [], [], []
    forms = {}
    for g, grp in enumerate(net.groups):
        shape = (net.k_eff(g), grp.count, grp.terminals_per_device, T)
        size = int(np.prod(shape))
        p_idx.append(nvar + np.arange(size).reshape(shape))
        nvar += size
        th_idx.append(nvar + np.arange(size).reshape(shape))
        nvar += size
        if grp.kind in (DeviceKind.BATTERY, DeviceKind.GENERIC_QP):
            form = qp_form(grp.kind, net.group_params(g), grp.terminals_per_device, T)
            forms[g] = form
            sshape = (net.k_eff(g), grp.count, form.num_local)
            s_idx.append(nvar + np.arange(int(np.prod(sshape))).reshape(sshape))
            nvar += int(np.prod(sshape))
        else:
            s_idx.append(None)

    Pd = np.zeros(nvar)  # diagonal part
    Pq_r, Pq_c, Pq_v = [], [], []
    c = np.zeros(nvar)
    eq, ineq = _Rows(), _Rows()
    eq_rows, ineq_rows = {}, {}

    for g, grp in enumerate(net.groups):
        prm = net.group_params(g)
        w = 1.0 / net.k_eff(g)
        pi, ti = p_idx[g], th_idx[g]
        kind = grp.kind
        if kind == DeviceKind.GENERATOR:
            p1 = pi[:, :, 0]
            Pd[p1] += 2.0 * w * np.broadcast_to(prm["a"][..., None], p1.shape)
            c[p1] += w * np.broadcast_to(prm["b"][..., None], p1.shape)
            pin = (prm["p_min"] == prm["p_max"]).ravel()
            flat = p1.reshape(-1, 1)
            ineq_rows[(g, "p_max")], eq_rows[(g, "p_max")] = _split_rows(
                ineq, eq, flat, 1.0, prm["p_max"].ravel(), pin, p1.shape)
            ineq_rows[(g, "p_min")], _ = _split_rows(ineq, None, flat, -1.0, -prm["p_min"].ravel(), pin, p1.shape)
        elif kind == DeviceKind.FIXED_LOAD:
            p1 = pi[:, :, 0]
            eq_rows[(g, "p_load")] = eq.add(p1.reshape(-1, 1), 1.0, prm["p_load"].ravel()).reshape(p1.shape)
        elif kind in (DeviceKind.AC_LINE, DeviceKind.DC_LINE):
            p1, p2 = pi[:, :, 0], pi[:, :, 1]
            eq_rows[(g, "flow_sum")] = eq.add(np.stack([p1.ravel(), p2.ravel()], 1), 1.0, 0.0)
            u = np.broadcast_to(prm["u"][..., None], p2.shape).ravel()
            pin = u == 0
            flat = p2.reshape(-1, 1)
            ineq_rows[(g, "u_upper")], eq_rows[(g, "u_upper")] = _split_rows(ineq, eq, flat, 1.0, u, pin, p2.shape)
            ineq_rows[(g, "u_lower")], _ = _split_rows(ineq, None, flat, -1.0, u, pin, p2.shape)
            if kind == DeviceKind.AC_LINE:
                bb = np.broadcast_to(prm["b"][..., None], p2.shape).ravel()
                t1, t2 = ti[:, :, 0].ravel(), ti[:, :, 1].ravel()
                coefs = np.stack([np.ones_like(bb), -bb, bb], 1)
                eq_rows[(g, "flow")] = eq.add(np.stack([p2.ravel(), t1, t2], 1), coefs, 0.0).reshape(p2.shape)
        else:
            form = forms[g]
            d = form.dense()
            si = s_idx[g].reshape(-1, form.num_local)
            k_n = si.shape[0]
            pt = np.concatenate([pi.reshape(k_n, -1), ti.reshape(k_n, -1)], axis=1)
            cols_all = np.concatenate([pt, si], axis=1)  # (B, 2 tau T + mu)
            C = np.concatenate([d["A1"], d["A2"], d["A3"]], axis=2)
            Q = d["Q"]
            for i in range(k_n):
                qi = np.nonzero(Q[i])
                Pq_r.append(si[i][qi[0]])
                Pq_c.append(si[i][qi[1]])
                Pq_v.append(2.0 * w * Q[i][qi])
                c[si[i]] += w * d["q"][i]
                for r in range(form.num_rows):
                    nz = np.nonzero(C[i, r])[0]
                    target = eq if form.eq_mask[r] else ineq
                    target.add(cols_all[i, nz][None], C[i, r, nz][None], d["rhs"][i, r])

    # node balance and phase consistency for every contingency
    bal_terms: list[list[list[int]]] = [[[] for _ in range(net.num_nodes)] for _ in range(K1)]
    th_terms: list[list[list[int]]] = [[[] for _ in range(net.num_nodes)] for _ in range(K1)]
    for g, grp in enumerate(net.groups):
        for k in range(K1):
            kk = k if net.k_eff(g) > 1 else 0
            for d in range(grp.count):
                for i in range(grp.terminals_per_device):
                    node = grp.terminal_node[d, i]
                    bal_terms[k][node].append(p_idx[g][kk, d, i])
                    th_terms[k][node].append(th_idx[g][kk, d, i])
    node_shape = (K1, net.num_nodes, T)
    elastic = nvar + np.arange(2 * K1 * net.num_nodes * T).reshape((2,) + node_shape)
    nvar += elastic.size
    penalty = ELASTIC_FACTOR * (1.0 + np.abs(c).max(initial=0.0) + 2.0 * Pd.max(initial=0.0) * _scale(net))
    c = np.concatenate([c, np.full(elastic.size, penalty)])
    Pd = np.concatenate([Pd, np.zeros(elastic.size)])
    ineq.add(elastic.reshape(-1, 1), -1.0, 0.0)
    balance_rows = np.zeros(node_shape, dtype=np.int64)
    for k in range(K1):
        for node in range(net.num_nodes):
            cols = np.array(bal_terms[k][node])  # (terms, T)
            ep, em = elastic[0, k, node], elastic[1, k, node]
            if cols.size == 0:
                cols = np.zeros((0, T), dtype=np.int64)
            terms = np.concatenate([cols.T, ep[:, None], em[:, None]], axis=1)
            coefs = np.concatenate([np.ones(cols.shape[0]), [1.0, -1.0]])
            balance_rows[k, node] = eq.add(terms, coefs, 0.0)
            th = np.array(th_terms[k][node])
            if th.size == 0:
                continue
            for j in range(1, th.shape[0]):
                eq.add(np.stack([th[j], th[0]], 1), np.array([1.0, -1.0]), 0.0)

    P = sp.diags(Pd, format="csr")
    if Pq_r:
        P = P + sp.csr_matrix(
            (np.concatenate(Pq_v), (np.concatenate(Pq_r), np.concatenate(Pq_c))), shape=(nvar, nvar)
        )
    A, b = eq.matrix(nvar)
    G, h = ineq.matrix(nvar)
    return MonolithicQp(
        P.tocsr(), c, A, b, G, h, p_idx, th_idx, s_idx, balance_rows, elastic, penalty, eq_rows, ineq_rows
    )


def solve_exact(qp: MonolithicQp, tol: float = 1e-8, max_iter: int = 200) -> QpResult:
    """Solve ``qp``; raises :class:`InfeasibleError` when no feasible point exists.

    The returned objective excludes the elastic penalty.
    """
    res = solve_qp(qp.P, qp.c, qp.A, qp.b, qp.G, qp.h, tol=tol, max_iter=max_iter)
    if res.status != "optimal":
        gap = feasibility_gap(qp.A, qp.b, qp.G, qp.h, qp.num_vars)
        if gap > FEAS_GAP_TOL:
            raise InfeasibleError(gap)
        raise RuntimeError(
            f"interior-point method stopped after {res.iterations} iterations "
            f"with KKT residual {res.kkt_residual:.3g}"
        )
    viol = qp.violation(res.x)
    if viol > FEAS_GAP_TOL * (1.0 + np.abs(qp.b).max(initial=0.0)):
        raise InfeasibleError(viol)
    res.objective -= qp.penalty * viol
    return res


def solve_network(net: Network, tol: float = 1e-8) -> OracleResult:
    qp = assemble(net)
    res = solve_exact(qp, tol)
    p = [res.x[i] for i in qp.p_idx]
    th = [res.x[i] for i in qp.theta_idx]
    return OracleResult(p, th, res.objective, qp, res)


def parameter_gradient(result: OracleResult, net: Network, group: int, name: str) -> np.ndarray:
    """Derivative of the optimal value with respect to a base parameter.

    Uses the envelope theorem on the Lagrangian. For the contingency group a
    contingency slice counts toward the base parameter wherever it still
    equals the base value (outaged entries are pinned, not scaled).
    Supported: generator ``a, b, p_min, p_max``; fixed_load ``p_load``;
    ac_line ``u, b``; dc_line ``u``.
    """
    qp, x, y, z = result.qp, result.raw.x, result.raw.y, result.raw.z

    def dual(vec, ids):
        return np.where(ids >= 0, vec[np.maximum(ids, 0)], 0.0)

    grp = net.groups[group]
    prm = net.group_params(group)
    w = 1.0 / net.k_eff(group)
    kind = grp.kind
    if kind == DeviceKind.GENERATOR and name in ("a", "b"):
        p1 = x[qp.p_idx[group][:, :, 0]]
        per = w * (p1 * p1 if name == "a" else p1).sum(axis=-1)
    elif kind == DeviceKind.GENERATOR and name == "p_max":
        per = -dual(z, qp.ineq_rows[(group, "p_max")]) - dual(y, qp.eq_rows[(group, "p_max")])
    elif kind == DeviceKind.GENERATOR and name == "p_min":
        per = dual(z, qp.ineq_rows[(group, "p_min")])
    elif kind == DeviceKind.FIXED_LOAD and name == "p_load":
        per = -y[qp.eq_rows[(group, "p_load")]]
    elif kind in (DeviceKind.AC_LINE, DeviceKind.DC_LINE) and name == "u":
        per = -(
            dual(z, qp.ineq_rows[(group, "u_upper")]) + dual(z, qp.ineq_rows[(group, "u_lower")])
            + dual(y, qp.eq_rows[(group, "u_upper")])
        ).sum(axis=-1)
    elif kind == DeviceKind.AC_LINE and name == "b":
        ti = qp.theta_idx[group]
        dth = x[ti[:, :, 0]] - x[ti[:, :, 1]]
        per = (y[qp.eq_rows[(group, "flow")]] * -dth).sum(axis=-1)
    else:
        raise ValueError(f"no gradient rule for {kind.value} parameter {name!r}")
    live = prm[name] == prm[name][:1]
    return np.sum(np.where(live, per, 0.0), axis=0)
