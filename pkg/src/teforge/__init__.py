"""Heuristic analysis and LLM-guided specialization for traffic engineering."""

from .core import (
    EPS_CAP,
    EPS_LP,
    DemandMatrix,
    FlowAssignment,
    Path,
    Topology,
    build_path_set,
    k_shortest_paths,
    solve_optimal,
)
from .dsl import HeuristicProgram, base_heuristic, interpret, parse_program, specialist_program, validate

__version__ = "0.1.0"
