"""Boundary unknowns and residual of the partitioned power flow.

The unknown vector is laid out as ``[P_B1 | Q_B1 | P_B2 | Q_B2 | ... |
theta_i0 for each non-dominant region]``; the residual uses the same slots
with the angle slots holding the slack active-power mismatch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .grid import PartitionedSystem, RegionGrid
from .jfng import EvaluationError, JfngParams, JfngResult, Preconditioner, jfng_solve
from .powerflow import (CentralizedSolution, RegionSolution, RegionSolver,
                        branch_flows, evaluate_link_injections)


class LayoutMismatchError(ValueError):
    pass


class RegionSolveError(EvaluationError):
    def __init__(self, region: int, x=None, message: str = ""):
        super().__init__(f"region {region} power flow failed{': ' + message if message else ''}")
        self.region = region
        self.x = None if x is None else np.array(x)


@dataclass(frozen=True)
class BoundaryLayout:
    regions: tuple[int, ...]
    boundary: Mapping[int, tuple[int, ...]]
    slack_bus: Mapping[int, int]
    dominant_region: int
    reference_angle: float

    @classmethod
    def from_system(cls, system: PartitionedSystem) -> "BoundaryLayout":
        regions = tuple(r.region_index for r in system.regions)
        dom = system.dominant_region
        return cls(
            regions=regions,
            boundary={r.region_index: tuple(r.boundary_bus_ids) for r in system.regions},
            slack_bus={r.region_index: r.slack_bus for r in system.regions},
            dominant_region=dom,
            reference_angle=system.case.bus(system.region(dom).slack_bus).v_ang,
        )

    @property
    def angle_regions(self) -> tuple[int, ...]:
        return tuple(r for r in self.regions if r != self.dominant_region)

    @property
    def size(self) -> int:
        return sum(2 * len(self.boundary[r]) for r in self.regions) + len(self.angle_regions)

    def offsets(self) -> dict[int, int]:
        out, pos = {}, 0
        for r in self.regions:
            out[r] = pos
            pos += 2 * len(self.boundary[r])
        return out

    def angle_index(self, region: int) -> int:
        base = sum(2 * len(self.boundary[r]) for r in self.regions)
        return base + self.angle_regions.index(region)

    def descriptor(self) -> list[tuple[int, int, str]]:
        """Slot map: ``(region, bus, quantity)`` for every vector entry."""
        slots = []
        for r in self.regions:
            slots += [(r, b, "P") for b in self.boundary[r]]
            slots += [(r, b, "Q") for b in self.boundary[r]]
        slots += [(r, self.slack_bus[r], "theta") for r in self.angle_regions]
        return slots

    def hash(self) -> str:
        blob = json.dumps(self.descriptor(), separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise LayoutMismatchError(f"expected boundary vector of length {self.size}, got {x.shape}")
        return x

    def split(self, x) -> dict[int, tuple[np.ndarray, np.ndarray, float]]:
        """Per-region ``(P_B, Q_B, slack angle)`` slices of ``x``."""
        x = self.check(x)
        out = {}
        for r, off in self.offsets().items():
            nb = len(self.boundary[r])
            theta = self.reference_angle if r == self.dominant_region else float(x[self.angle_index(r)])
            out[r] = (x[off:off + nb].copy(), x[off + nb:off + 2 * nb].copy(), theta)
        return out

    def flat_vector(self) -> np.ndarray:
        x = np.zeros(self.size)
        for r in self.angle_regions:
            x[self.angle_index(r)] = self.reference_angle
        return x

    def assemble(self, x, voltages: Mapping[int, np.ndarray], slack_p: Mapping[int, float],
                 slack_p_set: Mapping[int, float], link_injections) -> np.ndarray:
        """Residual from region replies and link-side injections."""
        x = self.check(x)
        f = np.empty(self.size)
        for r, off in self.offsets().items():
            nb = len(self.boundary[r])
            p_link, q_link = link_injections[r]
            f[off:off + nb] = x[off:off + nb] + p_link
            f[off + nb:off + 2 * nb] = x[off + nb:off + 2 * nb] + q_link
        for r in self.angle_regions:
            f[self.angle_index(r)] = slack_p_set[r] - slack_p[r]
        return f


class RegionWorker:
    """Region-side solver state for one lane of boundary evaluations.

    Successive solves start from the last converged profile; a failed warm
    solve is retried once from a flat start.
    """

    def __init__(self, region: RegionGrid, reference_profile: np.ndarray | None = None):
        self.region = region
        self.solver = RegionSolver(region)
        self.reference_profile = reference_profile
        self.profile = reference_profile
        self.last: RegionSolution | None = None

    @property
    def slack_p_set(self) -> float:
        return self.region.slack.p_inj

    def solve(self, p, q, theta) -> RegionSolution:
        sol = self.solver.solve(p, q, theta, start=self.profile)
        if not sol.converged and self.profile is not None:
            sol = self.solver.solve(p, q, theta, start=None)
        if sol.converged:
            self.profile = sol.voltage
        self.last = sol
        return sol


class LocalResidual:
    """Boundary residual evaluated by calling every region solver in-process."""

    def __init__(self, system: PartitionedSystem, layout: BoundaryLayout | None = None,
                 reference_profiles: Mapping[int, np.ndarray] | None = None):
        self.system = system
        self.layout = layout or BoundaryLayout.from_system(system)
        profiles = reference_profiles or {}
        self.workers = {r.region_index: RegionWorker(r, profiles.get(r.region_index))
                        for r in system.regions}
        self.evaluations = 0
        self.last_x: np.ndarray | None = None

    def __call__(self, x) -> np.ndarray:
        x = self.layout.check(x)
        self.evaluations += 1
        voltages, slack_p = {}, {}
        for r, (p, q, theta) in self.layout.split(x).items():
            sol = self.workers[r].solve(p, q, theta)
            if not sol.converged:
                raise RegionSolveError(r, x, f"mismatch {sol.max_mismatch:.3g}")
            voltages[r] = sol.boundary_voltages
            slack_p[r] = sol.slack_p
        link = evaluate_link_injections(self.system.link_partition, voltages, self.layout.boundary)
        self.last_x = x.copy()
        set_p = {r: w.slack_p_set for r, w in self.workers.items()}
        return self.layout.assemble(x, voltages, slack_p, set_p, link)

    def profiles(self) -> dict[int, np.ndarray]:
        return {r: w.profile for r, w in self.workers.items()}

    def stitched_voltages(self) -> dict[int, complex]:
        """Whole-system voltages assembled from the last region solutions."""
        out = {}
        for w in self.workers.values():
            if w.last is None:
                raise RuntimeError("no region solution available yet")
            out.update(w.last.voltage_map())
        return out


def evaluate_boundary_residual(x, system: PartitionedSystem) -> np.ndarray:
    return LocalResidual(system)(x)


def boundary_vector_from_solution(system: PartitionedSystem, layout: BoundaryLayout,
                                  solution: CentralizedSolution | Mapping[int, complex]) -> np.ndarray:
    """Project a whole-system state onto the boundary unknowns."""
    voltage = solution.voltage_map() if isinstance(solution, CentralizedSolution) else dict(solution)
    x = np.zeros(layout.size)
    link_v = {r: np.array([voltage[b] for b in layout.boundary[r]]) for r in layout.regions}
    inj = evaluate_link_injections(system.link_partition, link_v, layout.boundary)
    for r, off in layout.offsets().items():
        nb = len(layout.boundary[r])
        x[off:off + nb] = -inj[r][0]
        x[off + nb:off + 2 * nb] = -inj[r][1]
    for r in layout.angle_regions:
        x[layout.angle_index(r)] = float(np.angle(voltage[layout.slack_bus[r]]))
    return x


def solve_distributed(system: PartitionedSystem, params: JfngParams = JfngParams(),
                      x0=None, M0: Preconditioner | None = None,
                      reference_profiles=None) -> tuple[JfngResult, LocalResidual]:
    """Boundary solve with in-process region solvers; the evaluator is
    returned so callers can stitch the region solutions at the solution."""
    F = LocalResidual(system, reference_profiles=reference_profiles)
    x0 = F.layout.flat_vector() if x0 is None else x0
    result = jfng_solve(F, x0, M0, params)
    if F.last_x is None or not np.array_equal(F.last_x, result.solution):
        F(result.solution)
    return result, F


def link_flows(system: PartitionedSystem, voltage: Mapping[int, complex]):
    return branch_flows(system.link_partition.branches, voltage)
