"""Proximal message passing for multi-period, contingency-constrained DC OPF."""

from .network import ContingencySpec, DeviceGroup, DeviceKind, Network, build_n_minus_1, make_group, validate
from .solver import AdaptiveConfig, Solution, SolverConfig, solve

__all__ = [
    "AdaptiveConfig",
    "ContingencySpec",
    "DeviceGroup",
    "DeviceKind",
    "Network",
    "Solution",
    "SolverConfig",
    "build_n_minus_1",
    "make_group",
    "solve",
    "validate",
]
