"""Device-node network topology, type groups and contingency data.

A network is a set of nodes joined to devices through terminals. Devices of the
same kind are batched into a :class:`DeviceGroup` so their proximal operators can
be evaluated as one vectorized call. Terminals are never stored globally; a
terminal is the triple ``(group, device, slot)`` and ``DeviceGroup.terminal_node``
maps it to a node.

At most one group is the *contingency group*. Its parameters may change in each
contingency ``k = 1..K`` and its schedules are solved per contingency; every
other group keeps one schedule shared by all contingencies.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class DeviceKind(str, enum.Enum):
    GENERATOR = "generator"
    FIXED_LOAD = "fixed_load"
    AC_LINE = "ac_line"
    DC_LINE = "dc_line"
    BATTERY = "battery"
    GENERIC_QP = "generic_qp"


TERMINALS_PER_DEVICE = {
    DeviceKind.GENERATOR: 1,
    DeviceKind.FIXED_LOAD: 1,
    DeviceKind.AC_LINE: 2,
    DeviceKind.DC_LINE: 2,
    DeviceKind.BATTERY: 1,
}

# name -> trailing shape; "T" is the horizon, the device axis is implicit
PARAM_SCHEMA: dict[DeviceKind, dict[str, tuple[str, ...]]] = {
    DeviceKind.GENERATOR: {"a": (), "b": (), "p_min": ("T",), "p_max": ("T",)},
    DeviceKind.FIXED_LOAD: {"p_load": ("T",)},
    DeviceKind.AC_LINE: {"u": (), "b": ()},
    DeviceKind.DC_LINE: {"u": ()},
    DeviceKind.BATTERY: {"alpha": (), "beta": (), "power": (), "duration": ()},
    # generic QP: p, theta flattened terminal-major to length tau*T
    DeviceKind.GENERIC_QP: {
        "Q": ("mu", "mu"),
        "q": ("mu",),
        "A1": ("m", "tauT"),
        "A2": ("m", "tauT"),
        "A3": ("m", "mu"),
        "rhs": ("m",),
        "eq_mask": ("m",),
    },
}


@dataclass(frozen=True, eq=False)
class DeviceGroup:
    """A homogeneous batch of devices.

    ``terminal_node`` has shape ``(n_devices, terminals_per_device)``; entry
    ``[d, i]`` is the node of terminal ``i`` of device ``d`` (``-1`` if
    unattached, which :func:`validate` reports). ``params`` holds the base-case
    parameter arrays, each with the device axis first.
    """

    kind: DeviceKind
    terminal_node: np.ndarray
    params: dict[str, np.ndarray]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", DeviceKind(self.kind))
        tn = np.asarray(self.terminal_node, dtype=np.int64)
        if tn.ndim == 1:
            tn = tn[:, None]
        object.__setattr__(self, "terminal_node", tn)
        object.__setattr__(
            self, "params", {k: np.asarray(v) for k, v in self.params.items()}
        )

    @property
    def count(self) -> int:
        return self.terminal_node.shape[0]

    @property
    def terminals_per_device(self) -> int:
        return self.terminal_node.shape[1]

    @property
    def num_terminals(self) -> int:
        return self.terminal_node.size


@dataclass(frozen=True, eq=False)
class ContingencySpec:
    """Per-contingency parameter values for the contingency group.

    ``params[name]`` has shape ``(K, n_devices, ...)`` and holds the complete
    parameter value in contingency ``k + 1``. Parameters not listed keep their
    base value in every contingency.
    """

    group: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0
    outages: tuple[int, ...] | None = None

    def __post_init__(self):
        params = {k: np.asarray(v, dtype=float) for k, v in self.params.items()}
        object.__setattr__(self, "params", params)
        counts = {v.shape[0] for v in params.values()}
        if len(counts) > 1:
            raise ValueError(f"inconsistent contingency counts {sorted(counts)}")
        if counts:
            object.__setattr__(self, "count", counts.pop())


@dataclass(frozen=True, eq=False)
class Network:
    num_nodes: int
    horizon: int
    groups: tuple[DeviceGroup, ...]
    contingencies: ContingencySpec | None = None
    declared_terminals: int | None = None
    node_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def num_terminals(self) -> int:
        if self.declared_terminals is not None:
            return self.declared_terminals
        return sum(g.num_terminals for g in self.groups)

    @property
    def num_contingencies(self) -> int:
        return 0 if self.contingencies is None else self.contingencies.count

    @property
    def contingency_group(self) -> int | None:
        return None if self.contingencies is None else self.contingencies.group

    @property
    def num_devices(self) -> int:
        return sum(g.count for g in self.groups)

    def k_eff(self, g: int) -> int:
        """Number of contingency slices held by group ``g``."""
        return self.num_contingencies + 1 if g == self.contingency_group else 1

    def group_params(self, g: int) -> dict[str, np.ndarray]:
        """Parameters of group ``g`` stacked to ``(k_eff, n_devices, ...)``."""
        return self._stacked_params[g]

    @cached_property
    def _stacked_params(self) -> list[dict[str, np.ndarray]]:
        out = []
        for g, group in enumerate(self.groups):
            stacked = {}
            for name, base in group.params.items():
                base = np.asarray(base)
                if g == self.contingency_group and self.num_contingencies > 0:
                    over = self.contingencies.params.get(name)
                    if over is None:
                        over = np.broadcast_to(
                            base, (self.num_contingencies,) + base.shape
                        )
                    stacked[name] = np.concatenate([base[None], over.astype(base.dtype)])
                else:
                    stacked[name] = base[None]
            out.append(stacked)
        return out

    def with_contingencies(self, spec: ContingencySpec | None) -> "Network":
        return replace(self, contingencies=spec)

    def device_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([g.count for g in self.groups])])

    def find_groups(self, kind: DeviceKind) -> list[int]:
        return [i for i, g in enumerate(self.groups) if g.kind == kind]


def node_degree(net: Network) -> np.ndarray:
    """Number of terminals attached to each node."""
    deg = np.zeros(net.num_nodes, dtype=np.int64)
    for group in net.groups:
        tn = group.terminal_node.ravel()
        ok = (tn >= 0) & (tn < net.num_nodes)
        deg += np.bincount(tn[ok], minlength=net.num_nodes)
    return deg


def _expected_shape(kind: DeviceKind, name: str, group: DeviceGroup, T: int):
    dims = PARAM_SCHEMA[kind][name]
    if kind == DeviceKind.GENERIC_QP:
        return None  # checked separately
    return (group.count,) + tuple(T if d == "T" else d for d in dims)


def _check_generic_qp(g: int, group: DeviceGroup, T: int) -> list[str]:
    errs = []
    p = group.params
    try:
        n, mu = p["q"].shape
        m = p["rhs"].shape[1]
    except (KeyError, ValueError):
        return [f"group {g}: generic_qp needs q (n, mu) and rhs (n, m)"]
    tT = group.terminals_per_device * T
    want = {
        "Q": (n, mu, mu),
        "A1": (n, m, tT),
        "A2": (n, m, tT),
        "A3": (n, m, mu),
        "eq_mask": (n, m),
    }
    for name, shape in want.items():
        if name not in p or p[name].shape != shape:
            got = None if name not in p else p[name].shape
            errs.append(f"group {g}: generic_qp param {name} has shape {got}, expected {shape}")
    if n != group.count:
        errs.append(f"group {g}: generic_qp params describe {n} devices, group has {group.count}")
    if not errs:
        Q = p["Q"]
        if not np.allclose(Q, np.swapaxes(Q, 1, 2)):
            errs.append(f"group {g}: generic_qp Q is not symmetric")
        elif mu > 0 and np.linalg.eigvalsh(Q).min() < -1e-10:
            errs.append(f"group {g}: generic_qp Q is not positive semidefinite")
        if not (p["eq_mask"] == p["eq_mask"][:1]).all():
            errs.append(f"group {g}: generic_qp eq_mask must be shared by all devices")
    return errs


def _check_param_values(g: int, kind: DeviceKind, params: dict, label: str) -> list[str]:
    errs = []

    def bad(mask, what):
        idx = np.flatnonzero(mask)
        if idx.size:
            errs.append(f"group {g} device {idx[0]}: {what} ({label})")

    for name, arr in params.items():
        if name != "eq_mask" and not np.all(np.isfinite(arr)):
            errs.append(f"group {g}: parameter {name} is not finite ({label})")
    if errs:
        return errs
    if kind == DeviceKind.GENERATOR:
        bad(params["a"] < 0, "quadratic cost a < 0")
        bad((params["p_min"] > params["p_max"]).any(axis=-1), "p_min > p_max")
    elif kind == DeviceKind.AC_LINE:
        bad(params["u"] < 0, "flow limit u < 0")
        bad(params["b"] < 0, "susceptance b < 0")
    elif kind == DeviceKind.DC_LINE:
        bad(params["u"] < 0, "flow limit u < 0")
    elif kind == DeviceKind.BATTERY:
        beta = params["beta"]
        bad((beta <= 0) | (beta > 1), "efficiency outside (0, 1]")
        bad(params["power"] < 0, "power capacity < 0")
        bad(params["duration"] < 0, "duration < 0")
        bad(params["alpha"] < 0, "discharge cost < 0")
    return errs


def validate(net: Network) -> list[str]:
    """Return every structural problem found in ``net``; empty means valid."""
    errs: list[str] = []
    N, T = net.num_nodes, net.horizon
    if N < 1:
        errs.append("network has no nodes")
    if T < 1:
        errs.append(f"horizon must be >= 1, got {T}")

    for g, group in enumerate(net.groups):
        kind = group.kind
        tau = TERMINALS_PER_DEVICE.get(kind)
        if tau is not None and group.terminals_per_device != tau:
            errs.append(
                f"group {g}: {kind.value} devices have {tau} terminals, "
                f"terminal_node gives {group.terminals_per_device}"
            )
        for d, i in np.argwhere((group.terminal_node < 0) | (group.terminal_node >= N)):
            errs.append(
                f"group {g} device {d} terminal {i}: maps to no node "
                f"(node index {group.terminal_node[d, i]})"
            )
        schema = PARAM_SCHEMA[kind]
        missing = set(schema) - set(group.params)
        extra = set(group.params) - set(schema)
        if missing:
            errs.append(f"group {g}: missing parameters {sorted(missing)}")
        if extra:
            errs.append(f"group {g}: unknown parameters {sorted(extra)}")
        if missing:
            continue
        if kind == DeviceKind.GENERIC_QP:
            errs.extend(_check_generic_qp(g, group, T))
            continue
        shape_ok = True
        for name in schema:
            want = _expected_shape(kind, name, group, T)
            if group.params[name].shape != want:
                shape_ok = False
                errs.append(
                    f"group {g}: parameter {name} has shape "
                    f"{group.params[name].shape}, expected {want}"
                )
        if shape_ok:
            errs.extend(_check_param_values(g, kind, group.params, "base case"))
            if kind == DeviceKind.AC_LINE:
                idx = np.flatnonzero(group.params["b"] <= 0)
                if idx.size:
                    errs.append(f"group {g} device {idx[0]}: base-case susceptance must be > 0")

    total = sum(g.num_terminals for g in net.groups)
    if net.declared_terminals is not None and total != net.declared_terminals:
        errs.append(
            f"terminal count mismatch: groups hold {total} terminals, "
            f"network declares {net.declared_terminals}"
        )

    deg = node_degree(net)
    for n in np.flatnonzero(deg == 0):
        errs.append(f"node {n}: no terminals attached")

    spec = net.contingencies
    if spec is not None:
        g = spec.group
        if not 0 <= g < len(net.groups):
            errs.append(f"contingency group index {g} out of range")
        else:
            group = net.groups[g]
            for name, arr in spec.params.items():
                if name not in group.params:
                    errs.append(f"contingency override for unknown parameter {name}")
                    continue
                want = (spec.count,) + group.params[name].shape
                if arr.shape != want:
                    errs.append(
                        f"contingency override {name} has shape {arr.shape}, expected {want}"
                    )
            if not errs and group.kind != DeviceKind.GENERIC_QP:
                stacked = net.group_params(g)
                for k in range(1, spec.count + 1):
                    errs.extend(
                        _check_param_values(
                            g, group.kind, {n: v[k] for n, v in stacked.items()},
                            f"contingency {k}",
                        )
                    )
    return errs


def build_n_minus_1(
    net: Network,
    outage_devices: Iterable[int | tuple[int, int]],
    group: int | None = None,
) -> ContingencySpec:
    """Single-line-outage contingencies over an AC line group.

    Contingency ``k`` zeroes the flow limit and susceptance of the ``k``-th
    listed line and leaves every other parameter at its base value. Devices
    are given as indices within ``group`` or as explicit ``(group, device)``
    pairs.
    """
    if group is None:
        group = net.contingency_group
    if group is None:
        lines = net.find_groups(DeviceKind.AC_LINE)
        if len(lines) != 1:
            raise ValueError("cannot infer the contingency group; pass group=")
        group = lines[0]
    if not 0 <= group < len(net.groups):
        raise ValueError(f"group {group} out of range")
    lg = net.groups[group]
    if lg.kind != DeviceKind.AC_LINE:
        raise ValueError(f"N-1 outages need an ac_line group, group {group} is {lg.kind.value}")

    idx = []
    for dev in outage_devices:
        if isinstance(dev, tuple):
            g, dev = dev
            if g != group:
                raise ValueError(
                    f"device ({g}, {dev}) is a {net.groups[g].kind.value}, "
                    f"not in contingency group {group}"
                )
        dev = int(dev)
        if not 0 <= dev < lg.count:
            raise ValueError(f"device {dev} not in contingency group {group}")
        idx.append(dev)

    K = len(idx)
    mask = np.ones((K, lg.count))
    mask[np.arange(K), idx] = 0.0
    u = lg.params["u"][None] * mask
    b = lg.params["b"][None] * mask
    return ContingencySpec(group=group, params={"u": u, "b": b}, count=K, outages=tuple(idx))


def make_group(kind: DeviceKind | str, nodes: Sequence, horizon: int, name: str = "", **params) -> DeviceGroup:
    """Build a group, broadcasting scalar or per-time parameters to full shape."""
    kind = DeviceKind(kind)
    tn = np.asarray(nodes, dtype=np.int64)
    if tn.ndim == 1:
        tn = tn[:, None]
    n = tn.shape[0]
    full = {}
    for pname, dims in PARAM_SCHEMA[kind].items():
        if pname not in params:
            raise TypeError(f"{kind.value} requires parameter {pname!r}")
        val = np.asarray(params.pop(pname), dtype=bool if pname == "eq_mask" else float)
        if kind != DeviceKind.GENERIC_QP:
            shape = (n,) + tuple(horizon if d == "T" else d for d in dims)
            val = np.array(np.broadcast_to(val, shape))
        full[pname] = val
    if params:
        raise TypeError(f"unexpected parameters {sorted(params)} for {kind.value}")
    return DeviceGroup(kind=kind, terminal_node=tn, params=full, name=name or kind.value)


def replace_group_param(net: Network, g: int, name: str, value) -> Network:
    """Copy of ``net`` with one base parameter array of group ``g`` replaced."""
    group = net.groups[g]
    params = dict(group.params)
    params[name] = np.asarray(value, dtype=float).reshape(np.shape(group.params[name]))
    groups = list(net.groups)
    groups[g] = replace(group, params=params)
    return replace(net, groups=tuple(groups))
