"""Distributed N-1 contingency analysis for multi-region power grids.

Regions solve their own AC power flows; a coordinator couples them through
boundary equations solved by Jacobian-free Newton-GMRES, screens line
outages by electrical distance to the boundary and sweeps them over
parallel worker lanes.
"""
from .boundary import BoundaryLayout, LocalResidual, evaluate_boundary_residual, solve_distributed
from .engine import DcaConfig, DcaReport, run_dca, write_report
from .grid import apply_outage, parse_case, parse_partition, partition_system
from .jfng import JfngParams, jfng_solve
from .powerflow import solve_centralized_power_flow, solve_region_power_flow

__version__ = "0.1.0"

__all__ = [
    "BoundaryLayout", "DcaConfig", "DcaReport", "JfngParams", "LocalResidual",
    "apply_outage", "evaluate_boundary_residual", "jfng_solve", "parse_case",
    "parse_partition", "partition_system", "run_dca", "solve_centralized_power_flow",
    "solve_distributed", "solve_region_power_flow", "write_report",
]
