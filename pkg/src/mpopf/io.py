"""JSON case and solution files, CSV traces.

Every JSON document carries a top-level ``"version"``. Floats are written
with ``repr`` precision (the ``json`` default), so a case round-trips
exactly. Units: power in MW, angles in rad, time in hours, cost in $.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import ContingencySpec, DeviceGroup, DeviceKind, Network, build_n_minus_1
from .solver import TRACE_FIELDS, Solution

CASE_VERSION = 1
SOLUTION_VERSION = 1
UNITS = {"power": "MW", "angle": "rad", "time": "h", "cost": "$", "susceptance": "MW/rad"}


class CaseFormatError(ValueError):
    pass


def _list(a) -> list:
    return np.asarray(a).tolist()


# -- cases ----------------------------------------------------------------------


def case_to_dict(net: Network) -> dict:
    groups = []
    for g in net.groups:
        groups.append({
            "name": g.name,
            "kind": g.kind.value,
            "terminal_node": _list(g.terminal_node),
            "params": {k: _list(v) for k, v in g.params.items()},
        })
    doc = {
        "version": CASE_VERSION,
        "units": UNITS,
        "nodes": {"count": net.num_nodes, "names": list(net.node_names) if net.node_names else None},
        "horizon": net.horizon,
        "groups": groups,
        "contingencies": None,
    }
    if net.declared_terminals is not None:
        doc["terminals"] = net.declared_terminals
    spec = net.contingencies
    if spec is not None:
        doc["contingencies"] = {
            "group": spec.group,
            "count": spec.count,
            "outages": list(spec.outages) if spec.outages else None,
            "overrides": {k: _list(v) for k, v in spec.params.items()},
        }
    return doc


def case_from_dict(doc: dict) -> Network:
    try:
        version = doc["version"]
        if version != CASE_VERSION:
            raise CaseFormatError(f"unsupported case version {version!r}")
        nodes = doc["nodes"]
        groups = []
        for i, gd in enumerate(doc["groups"]):
            kind = DeviceKind(gd["kind"])
            params = {
                k: np.asarray(v, dtype=bool if k == "eq_mask" else float)
                for k, v in gd["params"].items()
            }
            tn = np.asarray(gd["terminal_node"], dtype=np.int64)
            if tn.ndim == 1:
                tn = tn.reshape(-1, 1)
            groups.append(DeviceGroup(kind, tn, params, gd.get("name", "")))
        names = nodes.get("names")
        net = Network(
            int(nodes["count"]), int(doc["horizon"]), groups,
            declared_terminals=doc.get("terminals"),
            node_names=tuple(names) if names else None,
        )
        cd = doc.get("contingencies")
        if cd:
            if "n-1" in cd:
                net = net.with_contingencies(build_n_minus_1(net, cd["n-1"], group=cd.get("group")))
            else:
                over = {k: np.asarray(v, dtype=float) for k, v in cd["overrides"].items()}
                outages = tuple(cd["outages"]) if cd.get("outages") else ()
                net = net.with_contingencies(
                    ContingencySpec(int(cd["group"]), over, int(cd["count"]), outages)
                )
        return net
    except (KeyError, TypeError) as exc:
        raise CaseFormatError(f"malformed case file: missing or invalid field {exc}") from exc


def write_case(net: Network, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(net), indent=1) + "\n")


def read_case(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: not valid JSON ({exc})") from exc
    return case_from_dict(doc)


# -- solutions ------------------------------------------------------------------


@dataclass
class WarmStart:
    """Iterates read back from a solution file; accepted by ``init_state``."""

    p: list
    theta: list
    u: np.ndarray
    v: list
    rho_p: float
    rho_theta: float


def solution_to_dict(net: Network, sol: Solution, seed: int | None = None) -> dict:
    res = sol.residuals
    return {
        "version": SOLUTION_VERSION,
        "status": sol.status,
        "iterations": sol.iterations,
        "objective": sol.objective,
        "message": sol.message,
        "seed": seed,
        "residuals": None if res is None else {
            "r_primal_p": res.r_primal_p, "r_primal_theta": res.r_primal_theta,
            "r_dual_p": res.r_dual_p, "r_dual_theta": res.r_dual_theta,
        },
        "prices": _list(sol.prices),
        "groups": [
            {"name": g.name, "kind": g.kind.value, "p": _list(sol.p[i]), "theta": _list(sol.theta[i])}
            for i, g in enumerate(net.groups)
        ],
        "state": {
            "rho_p": sol.rho_p,
            "rho_theta": sol.rho_theta,
            "u": _list(sol.u),
            "v": [_list(v) for v in sol.v],
        },
    }


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")


def read_warm(path) -> WarmStart:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != SOLUTION_VERSION or "state" not in doc:
        raise CaseFormatError(f"{path}: not a solution file with solver state")
    st = doc["state"]
    return WarmStart(
        p=[np.asarray(g["p"], float) for g in doc["groups"]],
        theta=[np.asarray(g["theta"], float) for g in doc["groups"]],
        u=np.asarray(st["u"], float),
        v=[np.asarray(v, float) for v in st["v"]],
        rho_p=float(st["rho_p"]),
        rho_theta=float(st["rho_theta"]),
    )


# -- traces ---------------------------------------------------------------------


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([str(int(row[0]))] + [repr(float(x)) for x in row[1:]])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "iter" else float(v)) for k, v in r.items()}
            for r in csv.DictReader(fh)
        ]
