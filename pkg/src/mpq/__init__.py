"""Mixed-precision format planning for layered models.

Partition a computation graph into sequential groups, calibrate per-layer
sensitivities with a small reverse-mode engine, build per-group gain vectors,
and pick formats with an exact multiple-choice knapsack solver.
"""

from .graphir import CompGraph, Group, build_graph, partition_sequential
from .sensitivity import FormatRegistry, FormatSpec, SensitivityReport, calibrate, default_registry
from .solver import MckpInstance, Solution, solve_bb, solve_brute, solve_dp

__version__ = "0.1.0"

__all__ = [
    "CompGraph",
    "FormatRegistry",
    "FormatSpec",
    "Group",
    "MckpInstance",
    "SensitivityReport",
    "Solution",
    "build_graph",
    "calibrate",
    "default_registry",
    "partition_sequential",
    "solve_bb",
    "solve_brute",
    "solve_dp",
]
