"""Unrolled sensitivities of the message passing iteration.

The forward pass runs the plain (``alpha = 1``) iteration and records the
penalty schedule plus full-state checkpoints every ``checkpoint`` steps. The
reverse pass recomputes each segment from its checkpoint and applies the
adjoint of every step: the scatter/gather averages are symmetric
projections, the price updates are additions, and each closed-form prox is
linearized around its recorded inputs (clamp masks select which of the
target or the bound the output follows). Penalty changes enter as constant
rescalings of the duals.

Gradients are taken with respect to *base* parameters. For the contingency
group a contingency slice follows the base value wherever it still equals
it; outaged entries are pinned.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .devices import ANALYTIC_KINDS, ProxEngine, analytic_prox
from .network import PARAM_SCHEMA, ContingencySpec, DeviceKind, Network, replace_group_param
from .solver import SolverConfig, SolverState, adapt_penalties, init_state, iterate, solve
from .tensor_ops import gather_to_terminals, incidence, node_average, node_sum, reduce_to

DIFFERENTIABLE = {
    DeviceKind.GENERATOR: ("a", "b", "p_min", "p_max"),
    DeviceKind.FIXED_LOAD: ("p_load",),
    DeviceKind.AC_LINE: ("u", "b"),
    DeviceKind.DC_LINE: ("u",),
}


class UnsupportedKindError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterSelector:
    """One parameter array of one group, e.g. generator capacities."""

    group: int
    name: str

    @classmethod
    def parse(cls, net: Network, text: str, analytic: bool = True) -> "ParameterSelector":
        """``"<group name or index>:<param>"``, e.g. ``"generator:p_max"``.

        With ``analytic=False`` any real-valued parameter is accepted (finite
        differences only need to perturb it).
        """
        try:
            gtext, name = text.split(":")
        except ValueError:
            raise ValueError(f"selector {text!r} must look like 'group:param'") from None
        if gtext.isdigit():
            g = int(gtext)
        else:
            hits = [i for i, grp in enumerate(net.groups) if grp.name == gtext]
            if len(hits) != 1:
                raise ValueError(f"selector {text!r}: group name must match exactly one group")
            g = hits[0]
        sel = cls(g, name)
        sel.check(net, analytic)
        return sel

    def check(self, net: Network, analytic: bool = True) -> None:
        if not 0 <= self.group < len(net.groups):
            raise ValueError(f"group {self.group} out of range")
        kind = net.groups[self.group].kind
        allowed = DIFFERENTIABLE.get(kind, ()) if analytic else tuple(
            n for n in PARAM_SCHEMA[kind] if n != "eq_mask")
        if self.name not in allowed:
            what = "differentiable" if analytic else "a real-valued parameter"
            raise ValueError(f"{kind.value} parameter {self.name!r} is not {what}; choose from {allowed}")

    def value(self, net: Network) -> np.ndarray:
        return np.asarray(net.groups[self.group].params[self.name], dtype=float)

    def live_mask(self, net: Network) -> np.ndarray:
        stacked = net.group_params(self.group)[self.name]
        return stacked == stacked[:1]


def with_parameter(net: Network, sel: ParameterSelector, value: np.ndarray) -> Network:
    """Network with a new base value; contingency slices equal to the old base follow it."""
    old = sel.value(net)
    value = np.asarray(value, dtype=float).reshape(old.shape)
    spec = net.contingencies
    out = replace_group_param(net, sel.group, sel.name, value)
    if spec is not None and spec.group == sel.group and sel.name in spec.params:
        over = spec.params[sel.name]
        new_over = np.where(over == old[None], value[None], over)
        params = dict(spec.params)
        params[sel.name] = new_over
        out = out.with_contingencies(ContingencySpec(spec.group, params, spec.count, spec.outages))
    return out


# -- objectives -----------------------------------------------------------------


class TotalCost:
    """Total device cost of a schedule, contingency costs averaged over contingencies.

    Indicator terms are zero on prox outputs, so only generator costs
    contribute to the value and the derivatives.
    """

    def value(self, net: Network, p: list, theta: list) -> float:
        total = 0.0
        for g, grp in enumerate(net.groups):
            if grp.kind == DeviceKind.GENERATOR:
                prm = net.group_params(g)
                p1 = p[g][:, :, 0]
                total += float(np.sum(prm["a"][..., None] * p1 * p1 + prm["b"][..., None] * p1)) / p[g].shape[0]
        return total

    def grad(self, net: Network, p: list, theta: list):
        """``(dp, dtheta, dparams)`` with ``dparams[(g, name)]`` shaped like the stacked params."""
        dp = [np.zeros_like(a) for a in p]
        dth = [np.zeros_like(a) for a in theta]
        dprm = {}
        for g, grp in enumerate(net.groups):
            if grp.kind != DeviceKind.GENERATOR:
                continue
            prm = net.group_params(g)
            w = 1.0 / p[g].shape[0]
            p1 = p[g][:, :, 0]
            dp[g][:, :, 0] = w * (2.0 * prm["a"][..., None] * p1 + prm["b"][..., None])
            dprm[(g, "a")] = w * np.sum(p1 * p1, axis=-1)
            dprm[(g, "b")] = w * np.sum(p1, axis=-1)
        return dp, dth, dprm


# -- prox linearizations --------------------------------------------------------


class _ProxLin:
    """Linearization of one group's prox around a recorded input."""

    def __init__(self, kind: DeviceKind, params: dict, tx, ty, rp: float, rt: float):
        self.kind = kind
        self.params = params
        self.rp, self.rt = rp, rt
        self.tx, self.ty = tx, ty
        if kind == DeviceKind.GENERATOR:
            a, b = params["a"][..., None], params["b"][..., None]
            x = tx[:, :, 0]
            den = 2.0 * a + rp
            raw = (rp * x - b) / den
            self.up = raw > params["p_max"]
            self.lo = (raw < params["p_min"]) & ~self.up
            self.free = ~(self.up | self.lo)
            self.c_x = np.where(self.free, rp / den, 0.0)
            self.c_b = np.where(self.free, -1.0 / den, 0.0)
            self.c_a = np.where(self.free, -2.0 * raw / den, 0.0)
        elif kind == DeviceKind.AC_LINE:
            u, b = params["u"][..., None], params["b"][..., None]
            self.live = np.broadcast_to(b > 0, tx[:, :, 0].shape)
            bs = np.where(b > 0, b, 1.0)
            x1, x2, y1, y2 = tx[:, :, 0], tx[:, :, 1], ty[:, :, 0], ty[:, :, 1]
            num = rp * (x2 - x1) + rt * (y1 - y2) / (2.0 * bs)
            den = 2.0 * rp + rt / (2.0 * bs * bs)
            raw = num / den
            self.up = (raw > u) & self.live
            self.lo = (raw < -u) & self.live & ~self.up
            self.free = self.live & ~(self.up | self.lo)
            self.p2 = np.where(self.live, np.clip(raw, -u, u), 0.0)
            self.bs, self.num, self.den = bs, num, den
        elif kind == DeviceKind.DC_LINE:
            u = params["u"][..., None]
            raw = 0.5 * (tx[:, :, 1] - tx[:, :, 0])
            self.up = raw > u
            self.lo = (raw < -u) & ~self.up
            self.free = ~(self.up | self.lo)
        elif kind != DeviceKind.FIXED_LOAD:
            raise UnsupportedKindError(f"{kind.value} has no analytic linearization")

    def jvp(self, dtx, dty, dprm: dict):
        """Tangent of ``(p, theta)`` for tangents of the targets and (stacked) parameters."""
        k = self.kind
        z = lambda name, like: dprm.get(name, np.zeros_like(like))  # noqa: E731
        if k == DeviceKind.GENERATOR:
            prm = self.params
            da = z("a", prm["a"])[..., None]
            db = z("b", prm["b"])[..., None]
            dp = (self.c_x * dtx[:, :, 0] + self.c_b * db + self.c_a * da
                  + np.where(self.lo, z("p_min", prm["p_min"]), 0.0)
                  + np.where(self.up, z("p_max", prm["p_max"]), 0.0))
            return dp[:, :, None], dty.copy()
        if k == DeviceKind.FIXED_LOAD:
            return np.broadcast_to(z("p_load", self.params["p_load"]), dtx[:, :, 0].shape)[:, :, None].copy(), dty.copy()
        if k == DeviceKind.DC_LINE:
            du = z("u", self.params["u"])[..., None]
            dp2 = np.where(self.free, 0.5 * (dtx[:, :, 1] - dtx[:, :, 0]), 0.0) + np.where(self.up, du, 0.0) - np.where(self.lo, du, 0.0)
            return np.stack([-dp2, dp2], axis=2), dty.copy()
        # ac line
        rp, rt, bs = self.rp, self.rt, self.bs
        du = z("u", self.params["u"])[..., None]
        dbb = z("b", self.params["b"])[..., None]
        y1, y2 = self.ty[:, :, 0], self.ty[:, :, 1]
        dnum = rp * (dtx[:, :, 1] - dtx[:, :, 0]) + rt * (dty[:, :, 0] - dty[:, :, 1]) / (2.0 * bs)
        dnum_db = -rt * (y1 - y2) / (2.0 * bs * bs)
        dden_db = -rt / (bs ** 3)
        dfree = (dnum + dnum_db * dbb) / self.den - self.num / self.den ** 2 * dden_db * dbb
        dp2 = np.where(self.free, dfree, 0.0) + np.where(self.up, du, 0.0) - np.where(self.lo, du, 0.0)
        mid = 0.5 * (dty[:, :, 0] + dty[:, :, 1])
        corr = dp2 / (2.0 * bs) - self.p2 / (2.0 * bs * bs) * dbb
        dth1 = np.where(self.live, mid + corr, dty[:, :, 0])
        dth2 = np.where(self.live, mid - corr, dty[:, :, 1])
        dp2 = np.where(self.live, dp2, 0.0)
        return np.stack([-dp2, dp2], axis=2), np.stack([dth1, dth2], axis=2)

    def vjp(self, gp, gth):
        """Cotangents of the targets and the stacked parameters."""
        k = self.kind
        gtx = np.zeros_like(self.tx)
        gty = np.zeros_like(self.ty)
        out = {}
        if k == DeviceKind.GENERATOR:
            g = gp[:, :, 0]
            gtx[:, :, 0] = self.c_x * g
            gty[...] = gth
            out["a"] = np.sum(self.c_a * g, axis=-1)
            out["b"] = np.sum(self.c_b * g, axis=-1)
            out["p_min"] = np.where(self.lo, g, 0.0)
            out["p_max"] = np.where(self.up, g, 0.0)
            return gtx, gty, out
        if k == DeviceKind.FIXED_LOAD:
            gty[...] = gth
            out["p_load"] = gp[:, :, 0].copy()
            return gtx, gty, out
        if k == DeviceKind.DC_LINE:
            g2 = gp[:, :, 1] - gp[:, :, 0]
            gf = np.where(self.free, 0.5 * g2, 0.0)
            gtx[:, :, 0] = -gf
            gtx[:, :, 1] = gf
            gty[...] = gth
            out["u"] = np.sum(np.where(self.up, g2, 0.0) - np.where(self.lo, g2, 0.0), axis=-1)
            return gtx, gty, out
        # ac line: transpose of jvp
        rp, rt, bs = self.rp, self.rt, self.bs
        live = self.live
        gt1 = np.where(live, 0.0, gth[:, :, 0])
        gt2 = np.where(live, 0.0, gth[:, :, 1])
        lt1 = np.where(live, gth[:, :, 0], 0.0)
        lt2 = np.where(live, gth[:, :, 1], 0.0)
        g_mid = lt1 + lt2
        g_corr = lt1 - lt2
        g_dp2 = np.where(live, gp[:, :, 1] - gp[:, :, 0], 0.0) + g_corr / (2.0 * bs)
        g_db = -self.p2 / (2.0 * bs * bs) * g_corr
        gfree = np.where(self.free, g_dp2, 0.0)
        y1, y2 = self.ty[:, :, 0], self.ty[:, :, 1]
        g_dnum = gfree / self.den
        dnum_db = -rt * (y1 - y2) / (2.0 * bs * bs)
        dden_db = -rt / (bs ** 3)
        g_db = g_db + g_dnum * dnum_db - gfree * self.num / self.den ** 2 * dden_db
        gtx[:, :, 0] = -rp * g_dnum
        gtx[:, :, 1] = rp * g_dnum
        gty[:, :, 0] = gt1 + 0.5 * g_mid + rt / (2.0 * bs) * g_dnum
        gty[:, :, 1] = gt2 + 0.5 * g_mid - rt / (2.0 * bs) * g_dnum
        out["u"] = np.sum(np.where(self.up, g_dp2, 0.0) - np.where(self.lo, g_dp2, 0.0), axis=-1)
        out["b"] = np.sum(np.where(live, g_db, 0.0), axis=-1)
        return gtx, gty, out


# -- one message passing step as a function of (p, theta, u, v) -----------------


def _expand(a: np.ndarray, K1: int) -> np.ndarray:
    return np.broadcast_to(a, (K1,) + a.shape[1:])


def _avg_gather(x: list, net: Network, K1: int) -> list:
    """Terminal field of node averages, ``gather(avg(x))`` with ``K+1`` slices."""
    avg = _expand(node_average(x, net), K1)
    return gather_to_terminals(avg, net)


def _resid(x: list, net: Network, K1: int) -> list:
    return [_expand(a, K1) - b for a, b in zip(x, _avg_gather(x, net, K1))]


def step_targets(net: Network, p, theta, u, v):
    K1 = net.num_contingencies + 1
    z = _resid(p, net, K1)
    xi = _avg_gather(theta, net, K1)
    ug = gather_to_terminals(u, net)
    tx, ty = [], []
    for g in range(len(net.groups)):
        a = z[g] - ug[g]
        b = xi[g] - v[g]
        if net.k_eff(g) == 1:
            a = a.mean(axis=0, keepdims=True)
            b = b.mean(axis=0, keepdims=True)
        tx.append(a)
        ty.append(b)
    return tx, ty


def step_targets_vjp(net: Network, gtx, gty):
    """Cotangents of ``(p, theta, u, v)`` from cotangents of the targets."""
    K1 = net.num_contingencies + 1
    ez, ex = [], []
    for g in range(len(net.groups)):
        a, b = gtx[g], gty[g]
        if net.k_eff(g) == 1:
            a = _expand(a / K1, K1)
            b = _expand(b / K1, K1)
        ez.append(np.asarray(a))
        ex.append(np.asarray(b))
    gp = [reduce_to(r, net.k_eff(g)) for g, r in enumerate(_resid(ez, net, K1))]
    gth = [reduce_to(r, net.k_eff(g)) for g, r in enumerate(_avg_gather(ex, net, K1))]
    gu = -_expand(node_sum(ez, net), K1)
    gv = [-np.array(e) for e in ex]
    return gp, gth, np.array(gu), gv


def step_update(net: Network, p_new, th_new, u, v):
    K1 = net.num_contingencies + 1
    u2 = u + _expand(node_average(p_new, net), K1)
    v2 = [vg + r for vg, r in zip(v, _resid(th_new, net, K1))]
    return u2, v2


def step_update_vjp(net: Network, gu2, gv2):
    """Cotangents of ``(p_new, th_new, u, v)`` from those of ``(u2, v2)``."""
    K1 = net.num_contingencies + 1
    inv = incidence(net).inv_degree[None, :, None]
    gp = [reduce_to(np.asarray(a), net.k_eff(g))
          for g, a in enumerate(gather_to_terminals(gu2 * inv, net))]
    gth = [reduce_to(np.asarray(r), net.k_eff(g)) for g, r in enumerate(_resid(gv2, net, K1))]
    return gp, gth, gu2, list(gv2)


def linearize_step(net: Network, p, theta, u, v, rho_p: float, rho_theta: float):
    """Forward step plus the per-group prox linearizations."""
    K1 = net.num_contingencies + 1
    rp, rt = K1 * rho_p, K1 * rho_theta
    tx, ty = step_targets(net, p, theta, u, v)
    lins, p_new, th_new = [], [], []
    for g, grp in enumerate(net.groups):
        prm = net.group_params(g)
        lins.append(_ProxLin(grp.kind, prm, tx[g], ty[g], rp, rt))
        a, b = analytic_prox(grp.kind, prm, tx[g], ty[g], rp, rt)
        p_new.append(a)
        th_new.append(b)
    u2, v2 = step_update(net, p_new, th_new, u, v)
    return (p_new, th_new, u2, v2), lins


def step_jvp(net: Network, lins, dp, dth, du, dv, dprm: dict):
    """Tangent of one step; ``dprm[(g, name)]`` are stacked-parameter tangents."""
    K1 = net.num_contingencies + 1
    dtx, dty = step_targets(net, dp, dth, du, dv)
    dpn, dtn = [], []
    for g, lin in enumerate(lins):
        local = {name: val for (gg, name), val in dprm.items() if gg == g}
        a, b = lin.jvp(dtx[g], dty[g], local)
        dpn.append(a)
        dtn.append(b)
    du2 = du + _expand(node_average(dpn, net), K1)
    dv2 = [a + r for a, r in zip(dv, _resid(dtn, net, K1))]
    return dpn, dtn, du2, dv2


def step_vjp(net: Network, lins, gp2, gth2, gu2, gv2):
    """Cotangents of ``(p, theta, u, v)`` and stacked parameters for one step."""
    gpn, gtn, gu, gv = step_update_vjp(net, gu2, gv2)
    gpn = [a + b for a, b in zip(gpn, gp2)]
    gtn = [a + b for a, b in zip(gtn, gth2)]
    gtx, gty, gprm = [], [], {}
    for g, lin in enumerate(lins):
        a, b, pr = lin.vjp(gpn[g], gtn[g])
        gtx.append(a)
        gty.append(b)
        for name, val in pr.items():
            gprm[(g, name)] = val
    gp, gth, gu_t, gv_t = step_targets_vjp(net, gtx, gty)
    gu = gu + gu_t
    gv = [a + b for a, b in zip(gv, gv_t)]
    return gp, gth, gu, gv, gprm


# -- tape -----------------------------------------------------------------------


@dataclass
class Tape:
    net: Network
    config: SolverConfig
    iters: int
    rhos: list  # (rho_p, rho_theta) used by each step
    rescale: list  # (factor_u, factor_v) applied after each step
    checkpoints: dict  # step index -> SolverState at the start of that step
    final: SolverState
    checkpoint: int = 50


def _check_analytic(net: Network) -> None:
    for grp in net.groups:
        if grp.kind not in ANALYTIC_KINDS:
            raise UnsupportedKindError(
                f"group {grp.name!r} ({grp.kind.value}) has no analytic adjoint; "
                f"use finite differences (grad_fd / --fd)"
            )


def _run(net: Network, state: SolverState, config: SolverConfig, engine: ProxEngine, i: int):
    state, res = iterate(state, net, config, engine)
    ad = config.adaptive
    if ad is not None and i % ad.every == 0:
        state = adapt_penalties(state, res, config)
    return state


def solve_with_tape(net: Network, config: SolverConfig | None = None, iters: int = 1000, checkpoint: int = 50) -> Tape:
    """Run exactly ``iters`` plain iterations, recording what the reverse pass needs."""
    config = config or SolverConfig()
    if config.alpha != 1.0:
        raise ValueError("the tape records the alpha = 1 iteration only")
    _check_analytic(net)
    engine = ProxEngine(net)
    state = init_state(net, config)
    rhos, rescale, cps = [], [], {}
    for i in range(1, iters + 1):
        if (i - 1) % checkpoint == 0:
            cps[i - 1] = state.copy()
        before = (state.rho_p, state.rho_theta)
        rhos.append(before)
        state = _run(net, state, config, engine, i)
        rescale.append((before[0] / state.rho_p, before[1] / state.rho_theta))
    return Tape(net, config, iters, rhos, rescale, cps, state, checkpoint)


def replay(tape: Tape) -> SolverState:
    engine = ProxEngine(tape.net)
    state = tape.checkpoints[0].copy() if tape.iters else init_state(tape.net, tape.config)
    for i in range(1, tape.iters + 1):
        state = _run(tape.net, state, tape.config, engine, i)
    return state


def grad(tape: Tape, wrt: ParameterSelector, objective=None) -> np.ndarray:
    """Gradient of ``objective`` at the final iterate with respect to a base parameter."""
    net = tape.net
    wrt.check(net)
    objective = objective or TotalCost()
    fin = tape.final
    gp, gth, gprm_obj = objective.grad(net, fin.p, fin.theta)
    gu = np.zeros_like(fin.u)
    gv = [np.zeros_like(a) for a in fin.v]
    acc = np.zeros_like(net.group_params(wrt.group)[wrt.name], dtype=float)
    if (wrt.group, wrt.name) in gprm_obj:
        acc = acc + gprm_obj[(wrt.group, wrt.name)]

    engine = ProxEngine(net)
    starts = sorted(tape.checkpoints)
    for seg_start in reversed(starts):
        seg_end = min(seg_start + tape.checkpoint, tape.iters)
        states = [tape.checkpoints[seg_start].copy()]
        for i in range(seg_start + 1, seg_end):
            states.append(_run(net, states[-1], tape.config, engine, i))
        for i in range(seg_end, seg_start, -1):
            fu, fv = tape.rescale[i - 1]
            gu = gu * fu
            gv = [a * fv for a in gv]
            st = states[i - 1 - seg_start]
            rp, rt = tape.rhos[i - 1]
            _, lins = linearize_step(net, st.p, st.theta, st.u, st.v, rp, rt)
            gp, gth, gu, gv, gprm = step_vjp(net, lins, gp, gth, gu, gv)
            if (wrt.group, wrt.name) in gprm:
                acc = acc + gprm[(wrt.group, wrt.name)]
    return np.sum(np.where(wrt.live_mask(net), acc, 0.0), axis=0)


def grad_fd(
    net: Network,
    wrt: ParameterSelector,
    config: SolverConfig | None = None,
    iters: int = 1000,
    h: float = 1e-4,
    objective=None,
    coords=None,
) -> np.ndarray:
    """Central differences of ``objective`` after exactly ``iters`` iterations.

    The step for each coordinate is ``h * max(|x|, 1)``. ``coords`` limits the
    work to a subset of flat indices (others are returned as NaN).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    wrt.check(net, analytic=False)
    config = config or SolverConfig()
    run_cfg = replace(config, max_iter=iters, min_iter=iters)
    objective = objective or TotalCost()
    base = wrt.value(net)
    out = np.full(base.size, np.nan)
    idx = range(base.size) if coords is None else coords
    for j in idx:
        step = h * max(abs(base.flat[j]), 1.0)
        vals = []
        for sgn in (1.0, -1.0):
            x = base.copy()
            x.flat[j] += sgn * step
            pert = with_parameter(net, wrt, x)
            sol = solve(pert, run_cfg)
            vals.append(objective.value(pert, sol.p, sol.theta))
        out[j] = (vals[0] - vals[1]) / (2.0 * step)
    return out.reshape(base.shape)
