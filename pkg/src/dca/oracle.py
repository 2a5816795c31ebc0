"""Centralized reference computations: base case and exhaustive N-1."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .grid import Islanding, PartitionedSystem, apply_outage
from .powerflow import (CentralizedSolution, NonConvergence, OperatingLimits, Violation,
                        check_violations, solve_centralized_power_flow)

LINK_REGION = 0


def element_regions(system: PartitionedSystem) -> dict[str, dict[int, int]]:
    """Region tags used on violations; link branches are tagged 0."""
    branch = {br.id: r.region_index for r in system.regions for br in r.branches}
    branch.update({br.id: LINK_REGION for br in system.case.branches if br.id not in branch})
    return {"branch": branch, "bus": dict(system.spec.region_of_bus)}


def solve_base(system: PartitionedSystem) -> CentralizedSolution:
    return solve_centralized_power_flow(system.case, system.spec.dominant_slack_bus)


@dataclass
class OracleOutcome:
    branch_id: int
    status: str
    violations: list[Violation] = field(default_factory=list)
    solution: CentralizedSolution | None = None


def centralized_contingency(system: PartitionedSystem, branch_id: int,
                            limits: OperatingLimits, start=None) -> OracleOutcome:
    out = apply_outage(system, branch_id)
    if isinstance(out, Islanding):
        return OracleOutcome(branch_id, "Islanding")
    case = replace(system.case, branches=tuple(br for br in system.case.branches
                                               if br.id != branch_id))
    try:
        sol = solve_centralized_power_flow(case, system.spec.dominant_slack_bus, start=start)
    except NonConvergence:
        return OracleOutcome(branch_id, "NonConverged")
    viol = check_violations(sol.voltage_map(), case.branches, limits,
                            element_regions(system), contingency=branch_id)
    return OracleOutcome(branch_id, "Converged", viol, sol)


def exhaustive_n1(system: PartitionedSystem, limits: OperatingLimits | None = None,
                  base: CentralizedSolution | None = None) -> list[OracleOutcome]:
    """Every single-branch outage solved centrally from the base state."""
    limits = limits or OperatingLimits.from_case(system.case)
    base = base or solve_base(system)
    return [centralized_contingency(system, br.id, limits, base.voltage)
            for br in sorted(system.case.branches, key=lambda b: b.id)]


def violation_set(outcomes) -> set[tuple[str, int, int]]:
    return {v.key for o in outcomes for v in o.violations}
