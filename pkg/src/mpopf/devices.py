"""Device costs and proximal operators for the built-in catalog.

Every prox here minimizes ``f(p, theta) + (rho_p/2)||p - x||^2 +
(rho_theta/2)||theta - y||^2`` for a whole batch at once. Inputs carry a
leading contingency axis ``k`` and a device axis ``n``; schedules are
``(k, n, tau, T)`` and parameters ``(k, n, ...)``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .ipm import solve_qp
from .network import DeviceKind, Network
from .qp_prox import QpDeviceForm, QpProxWorkspace, battery_form, build_workspace, qp_prox

FEAS_TOL = 1e-6
MAX_INNER_ITERS = 50
# inner penalty relative to the prox's rho_p when none is given; the slack rows
# are in power units, so this keeps the inner split scale-free
OMEGA_SCALE = 0.15
INNER_RELAX = 1.8

ANALYTIC_KINDS = frozenset(
    {DeviceKind.GENERATOR, DeviceKind.FIXED_LOAD, DeviceKind.AC_LINE, DeviceKind.DC_LINE}
)
QP_KINDS = frozenset({DeviceKind.BATTERY, DeviceKind.GENERIC_QP})


# -- closed-form proxes --------------------------------------------------------


def prox_generator(a, b, p_min, p_max, x, rho):
    """Minimizer of ``a p^2 + b p + (rho/2)(p - x)^2`` over ``[p_min, p_max]``."""
    return np.clip((rho * x - b) / (2.0 * a + rho), p_min, p_max)


def prox_fixed_load(p_load, x, rho):
    return np.broadcast_to(p_load, np.shape(x)).astype(float, copy=True)


def prox_ac_line(u, b, x1, x2, y1, y2, rho_p, rho_theta):
    """Prox of the DC power flow line ``p1 = -p2, p2 = b (theta1 - theta2), |p2| <= u``.

    An outaged line (``b = 0``) carries no flow and leaves the phases free.
    """
    live = b > 0
    bs = np.where(live, b, 1.0)
    num = rho_p * (x2 - x1) + rho_theta * (y1 - y2) / (2.0 * bs)
    den = 2.0 * rho_p + rho_theta / (2.0 * bs * bs)
    p2 = np.clip(num / den, -u, u)
    th2 = 0.5 * (y1 + y2) - p2 / (2.0 * bs)
    th1 = th2 + p2 / bs
    p2 = np.where(live, p2, 0.0)
    th1 = np.where(live, th1, y1)
    th2 = np.where(live, th2, y2)
    return -p2, p2, th1, th2


def prox_dc_line(u, x1, x2, rho):
    """Prox of the lossless controllable line ``p1 = -p2, |p2| <= u``."""
    p2 = np.clip(0.5 * (x2 - x1), -u, u)
    return -p2, p2


def prox_battery(alpha, beta, power, duration, x, rho, iters: int = 10, omega: float | None = None, relax: float = INNER_RELAX):
    """One-shot battery prox for ``x`` of shape ``(B, T)`` (fresh inner state).

    ``omega`` defaults to ``OMEGA_SCALE * rho``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    form = battery_form(alpha, beta, power, duration, x.shape[1])
    ws = build_workspace(form, rho, 1.0, OMEGA_SCALE * rho if omega is None else omega)
    p, _ = qp_prox(ws, x, np.zeros_like(x), iters=iters, relax=relax)
    return p


# -- QP encodings ---------------------------------------------------------------


def qp_form(kind: DeviceKind, params: dict[str, np.ndarray], tau: int, horizon: int) -> QpDeviceForm:
    """QP encoding of a ``(k, n)`` parameter stack, flattened to ``k*n`` devices."""
    if kind == DeviceKind.BATTERY:
        flat = {name: np.asarray(params[name], float).reshape(-1) for name in ("alpha", "beta", "power", "duration")}
        return battery_form(flat["alpha"], flat["beta"], flat["power"], flat["duration"], horizon)
    if kind == DeviceKind.GENERIC_QP:
        def flat(name):
            v = np.asarray(params[name], float)
            return v.reshape((-1,) + v.shape[2:])

        eq = np.asarray(params["eq_mask"]).reshape(-1, np.shape(params["eq_mask"])[-1])
        return QpDeviceForm.from_dense(
            flat("Q"), flat("q"), flat("A1"), flat("A2"), flat("A3"), flat("rhs"),
            eq[0].astype(bool), tau, horizon,
        )
    raise ValueError(f"{kind.value} has no QP encoding")


# -- costs ----------------------------------------------------------------------


def _qp_cost(form: QpDeviceForm, p: np.ndarray, theta: np.ndarray, tol: float) -> np.ndarray:
    """``min_s s'Qs + q's`` subject to the device rows relaxed by ``tol``; +inf if empty."""
    d = form.dense()
    out = np.empty(form.batch)
    for i in range(form.batch):
        pt = np.concatenate([p[i], theta[i]])
        C = np.concatenate([d["A1"][i], d["A2"][i]], axis=1)
        resid = d["rhs"][i] - C @ pt
        A3 = d["A3"][i]
        eq = d["eq_mask"][i]
        G = np.concatenate([A3, -A3[eq]])
        h = np.concatenate([resid + tol, -(resid[eq] - tol)])
        mu = form.num_local
        if mu == 0:
            out[i] = 0.0 if np.all(h >= 0) else np.inf
            continue
        res = solve_qp(sp.csr_matrix(2.0 * d["Q"][i]), d["q"][i], G=sp.csr_matrix(G), h=h, tol=1e-10)
        if res.status != "optimal":
            out[i] = np.inf
            continue
        out[i] = res.objective
    return out


def cost(kind: DeviceKind, params: dict[str, np.ndarray], p: np.ndarray, theta: np.ndarray, tol: float = FEAS_TOL) -> np.ndarray:
    """Cost of every device, shape ``(k, n)``; ``+inf`` where a constraint fails by more than ``tol``."""
    kind = DeviceKind(kind)
    p = np.asarray(p, dtype=float)
    theta = np.asarray(theta, dtype=float)
    k, n = p.shape[:2]
    if kind == DeviceKind.GENERATOR:
        a, b = params["a"][..., None], params["b"][..., None]
        p1 = p[:, :, 0]
        val = np.sum(a * p1 * p1 + b * p1, axis=-1)
        ok = np.all((p1 >= params["p_min"] - tol) & (p1 <= params["p_max"] + tol), axis=-1)
    elif kind == DeviceKind.FIXED_LOAD:
        val = np.zeros((k, n))
        ok = np.all(np.abs(p[:, :, 0] - params["p_load"]) <= tol, axis=-1)
    elif kind in (DeviceKind.AC_LINE, DeviceKind.DC_LINE):
        u = params["u"][..., None]
        p1, p2 = p[:, :, 0], p[:, :, 1]
        ok = (np.abs(p1 + p2) <= tol) & (np.abs(p2) <= u + tol)
        if kind == DeviceKind.AC_LINE:
            flow = params["b"][..., None] * (theta[:, :, 0] - theta[:, :, 1])
            ok &= np.abs(p2 - flow) <= tol
        ok = np.all(ok, axis=-1)
        val = np.zeros((k, n))
    else:
        tau, T = p.shape[2:]
        form = qp_form(kind, {kk: np.broadcast_to(v, (k,) + v.shape[1:]) for kk, v in params.items()}, tau, T)
        val = _qp_cost(form, p.reshape(k * n, -1), theta.reshape(k * n, -1), tol).reshape(k, n)
        return val
    return np.where(ok, val, np.inf)


# -- batched dispatch -----------------------------------------------------------


def analytic_prox(kind: DeviceKind, params: dict[str, np.ndarray], x, y, rho_p: float, rho_theta: float):
    """Closed-form prox of a ``(k, n, tau, T)`` batch; ``params`` are ``(k, n, ...)``."""
    kind = DeviceKind(kind)
    if kind == DeviceKind.GENERATOR:
        p = prox_generator(
            params["a"][..., None], params["b"][..., None], params["p_min"], params["p_max"], x[:, :, 0], rho_p
        )[:, :, None]
        return p, y.copy()
    if kind == DeviceKind.FIXED_LOAD:
        p = prox_fixed_load(params["p_load"], x[:, :, 0], rho_p)[:, :, None]
        return p, y.copy()
    if kind == DeviceKind.AC_LINE:
        u, b = params["u"][..., None], params["b"][..., None]
        p1, p2, t1, t2 = prox_ac_line(u, b, x[:, :, 0], x[:, :, 1], y[:, :, 0], y[:, :, 1], rho_p, rho_theta)
        return np.stack([p1, p2], axis=2), np.stack([t1, t2], axis=2)
    if kind == DeviceKind.DC_LINE:
        p1, p2 = prox_dc_line(params["u"][..., None], x[:, :, 0], x[:, :, 1], rho_p)
        return np.stack([p1, p2], axis=2), y.copy()
    raise ValueError(f"{kind.value} has no closed-form prox")


class ProxEngine:
    """Evaluates group proxes for one network, owning the QP workspaces.

    Workspaces are rebuilt only when the effective penalties change; the inner
    slack and dual iterates carry over (``warm_inner``) across outer
    iterations and refactorizations. ``omega=None`` ties the inner penalty to
    the prox's ``rho_p``.
    """

    def __init__(
        self,
        net: Network,
        inner_iters: int = 10,
        omega: float | None = None,
        relax: float = INNER_RELAX,
        warm_inner: bool = True,
        inner_tol: float | None = None,
    ):
        if not 1 <= inner_iters <= MAX_INNER_ITERS:
            raise ValueError(f"inner_iters must lie in [1, {MAX_INNER_ITERS}]")
        self.net = net
        self.inner_iters = inner_iters
        self.omega = omega
        self.relax = relax
        self.warm_inner = warm_inner
        self.inner_tol = inner_tol
        self._forms: dict[int, QpDeviceForm] = {}
        self.workspaces: dict[int, QpProxWorkspace] = {}
        self.factorizations = 0

    def _workspace(self, g: int, rho_p: float, rho_theta: float) -> QpProxWorkspace:
        omega = OMEGA_SCALE * rho_p if self.omega is None else self.omega
        ws = self.workspaces.get(g)
        if ws is not None and ws.matches(rho_p, rho_theta, omega):
            return ws
        form = self._forms.get(g)
        if form is None:
            group = self.net.groups[g]
            form = qp_form(group.kind, self.net.group_params(g), group.terminals_per_device, self.net.horizon)
            self._forms[g] = form
        ws = build_workspace(form, rho_p, rho_theta, omega, warm=ws if self.warm_inner else None)
        self.factorizations += 1
        self.workspaces[g] = ws
        return ws

    def prox(self, g: int, x: np.ndarray, y: np.ndarray, rho_p: float, rho_theta: float):
        group = self.net.groups[g]
        if group.kind in ANALYTIC_KINDS:
            return analytic_prox(group.kind, self.net.group_params(g), x, y, rho_p, rho_theta)
        ws = self._workspace(g, rho_p, rho_theta)
        if not self.warm_inner:
            ws.reset()
        k, n, tau, T = x.shape
        p, th = qp_prox(
            ws, x.reshape(k * n, tau * T), y.reshape(k * n, tau * T),
            iters=self.inner_iters, tol=self.inner_tol, relax=self.relax,
        )
        return p.reshape(x.shape), th.reshape(y.shape)

    def local_cost(self, g: int) -> np.ndarray | None:
        """Inner objective of a QP group at its latest iterate, ``(k, n)``."""
        ws = self.workspaces.get(g)
        if ws is None or ws.primal is None:
            return None
        return ws.local_cost().reshape(self.net.k_eff(g), -1)


def dispatch_prox(net: Network, g: int, x, y, rho_p: float, rho_theta: float, engine: ProxEngine | None = None):
    """Kind-appropriate prox over every device (and contingency slice) of group ``g``."""
    if engine is None:
        engine = ProxEngine(net)
    return engine.prox(g, np.asarray(x, float), np.asarray(y, float), rho_p, rho_theta)
