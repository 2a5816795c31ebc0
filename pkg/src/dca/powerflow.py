"""Polar Newton-Raphson power flow for region grids and the whole case,
link-line injections and operating-limit checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import (Branch, Bus, GridCase, LinkPartition, RegionGrid,
                   branch_admittances, build_admittance_matrix)

TOL_REGION = 1e-8
MAX_ITER = 30
# extra Newton steps once tol is met, so finite differences of the solution
# are not polluted by solver noise
POLISH_TOL = 1e-12


class NonConvergence(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class SingularJacobianError(RuntimeError):
    pass


class MissingVoltageError(KeyError):
    pass


class NewtonSolver:
    """Newton-Raphson on a fixed admittance matrix.

    The Jacobian sparsity follows the admittance matrix, so its triplet
    layout is computed once and only the values are refreshed per iteration.
    """

    def __init__(self, ybus: sp.spmatrix, ref: int, pv: np.ndarray, pq: np.ndarray):
        n = ybus.shape[0]
        self.n = n
        self.ybus = sp.csr_matrix(ybus)
        self.ref = int(ref)
        self.pv = np.asarray(pv, dtype=int)
        self.pq = np.asarray(pq, dtype=int)
        self.pvpq = np.r_[self.pv, self.pq]
        npvpq, npq = len(self.pvpq), len(self.pq)
        self.nx = npvpq + npq

        coo = self.ybus.tocoo()
        rows, cols, vals = coo.row, coo.col, coo.data
        have_diag = np.zeros(n, dtype=bool)
        have_diag[rows[rows == cols]] = True
        missing = np.flatnonzero(~have_diag)
        rows = np.r_[rows, missing]
        cols = np.r_[cols, missing]
        vals = np.r_[vals, np.zeros(len(missing), dtype=complex)]
        self._i, self._k, self._y = rows, cols, vals
        diag_pos = np.empty(n, dtype=int)
        d = np.flatnonzero(rows == cols)
        diag_pos[rows[d]] = d
        self._diag = diag_pos

        prow = np.full(n, -1)
        prow[self.pvpq] = np.arange(npvpq)
        qrow = np.full(n, -1)
        qrow[self.pq] = npvpq + np.arange(npq)
        # unknown columns coincide with equation rows: theta on pvpq, |V| on pq
        tcol, vcol = prow, qrow
        pi, qi = prow[rows], qrow[rows]
        tk, vk = tcol[cols], vcol[cols]
        self._m = (
            (pi >= 0) & (tk >= 0),
            (pi >= 0) & (vk >= 0),
            (qi >= 0) & (tk >= 0),
            (qi >= 0) & (vk >= 0),
        )
        m1, m2, m3, m4 = self._m
        self._jrows = np.r_[pi[m1], pi[m2], qi[m3], qi[m4]]
        self._jcols = np.r_[tk[m1], vk[m2], tk[m3], vk[m4]]

    def mismatch(self, v: np.ndarray, s_spec: np.ndarray) -> np.ndarray:
        mis = v * np.conj(self.ybus @ v) - s_spec
        return np.r_[mis[self.pvpq].real, mis[self.pq].imag]

    def jacobian(self, v: np.ndarray) -> sp.csc_matrix:
        ibus = self.ybus @ v
        i, k = self._i, self._k
        a = v[i] * np.conj(self._y * v[k])
        dva = -1j * a
        dvm = a / np.abs(v[k])
        dva[self._diag] += 1j * v * np.conj(ibus)
        dvm[self._diag] += np.conj(ibus) * v / np.abs(v)
        m1, m2, m3, m4 = self._m
        data = np.r_[dva.real[m1], dvm.real[m2], dva.imag[m3], dvm.imag[m4]]
        return sp.csc_matrix((data, (self._jrows, self._jcols)), shape=(self.nx, self.nx))

    def solve(self, s_spec: np.ndarray, v0: np.ndarray, tol: float = TOL_REGION,
              max_iter: int = MAX_ITER, polish: bool = True):
        """Return ``(v, converged, iterations, max_mismatch)``."""
        v = np.array(v0, dtype=complex)
        vm, va = np.abs(v), np.angle(v)
        npvpq = len(self.pvpq)
        f = self.mismatch(v, s_spec)
        norm = np.max(np.abs(f)) if f.size else 0.0
        it = extra = 0
        while it < max_iter and np.isfinite(norm):
            if norm <= tol:
                if not polish or norm <= POLISH_TOL or extra >= 2:
                    break
                extra += 1
            try:
                lu = splu(self.jacobian(v))
            except RuntimeError as exc:
                raise SingularJacobianError(str(exc)) from exc
            dx = lu.solve(-f)
            va[self.pvpq] += dx[:npvpq]
            vm[self.pq] += dx[npvpq:]
            v = vm * np.exp(1j * va)
            f = self.mismatch(v, s_spec)
            norm = np.max(np.abs(f)) if f.size else 0.0
            it += 1
        converged = bool(np.isfinite(norm) and norm <= tol)
        return v, converged, it, float(norm)


@dataclass
class RegionSolution:
    bus_ids: list[int]
    v_mag: np.ndarray
    v_ang: np.ndarray
    boundary_voltages: np.ndarray
    slack_p: float
    slack_q: float
    iterations: int
    converged: bool
    max_mismatch: float

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def voltage_map(self) -> dict[int, complex]:
        return dict(zip(self.bus_ids, self.voltage))


def _bus_types(buses: Sequence[Bus], ref_id: int):
    ref = None
    pv, pq = [], []
    for i, b in enumerate(buses):
        if b.id == ref_id:
            ref = i
        elif b.kind in ("PV", "Slack"):
            pv.append(i)
        else:
            pq.append(i)
    return ref, np.array(pv, dtype=int), np.array(pq, dtype=int)


class RegionSolver:
    """Power flow of one region with trial boundary injections.

    Boundary buses are PQ buses whose scheduled injection is increased by
    the trial (P_B, Q_B). The region slack holds its scheduled magnitude and
    the supplied angle.
    """

    def __init__(self, region: RegionGrid, tol: float = TOL_REGION, max_iter: int = MAX_ITER):
        self.region = region
        self.tol = tol
        self.max_iter = max_iter
        self.bus_ids = region.bus_ids
        pos = {b: i for i, b in enumerate(self.bus_ids)}
        ref, pv, pq = _bus_types(region.buses, region.slack_bus)
        self.newton = NewtonSolver(build_admittance_matrix(region), ref, pv, pq)
        self.ref = ref
        self.boundary_pos = np.array([pos[b] for b in region.boundary_bus_ids], dtype=int)
        self.s_sched = np.array([complex(b.p_inj, b.q_inj) for b in region.buses])
        self.v_set = np.array([b.v_mag if b.kind != "PQ" else 1.0 for b in region.buses])

    def flat_start(self, slack_angle: float) -> np.ndarray:
        return self.v_set * np.exp(1j * slack_angle)

    def solve(self, boundary_p, boundary_q, slack_angle: float, start=None) -> RegionSolution:
        bp = np.asarray(boundary_p, dtype=float)
        bq = np.asarray(boundary_q, dtype=float)
        if bp.shape != self.boundary_pos.shape or bq.shape != self.boundary_pos.shape:
            raise ValueError(f"region {self.region.region_index} expects "
                             f"{len(self.boundary_pos)} boundary injections")
        s_spec = self.s_sched.copy()
        s_spec[self.boundary_pos] += bp + 1j * bq
        if start is None:
            v0 = self.flat_start(slack_angle)
        else:
            v0 = np.array(start, dtype=complex)
            # rotate the warm profile onto the requested reference angle
            v0 = v0 * np.exp(1j * (slack_angle - np.angle(v0[self.ref])))
            pvref = np.r_[self.newton.pv, self.ref]
            v0[pvref] = self.v_set[pvref] * np.exp(1j * np.angle(v0[pvref]))
        v0[self.ref] = self.v_set[self.ref] * np.exp(1j * slack_angle)
        v, ok, it, norm = self.newton.solve(s_spec, v0, self.tol, self.max_iter)
        s_ref = v[self.ref] * np.conj(self.newton.ybus[self.ref] @ v)
        s_ref = complex(np.ravel(s_ref)[0])
        return RegionSolution(
            bus_ids=self.bus_ids, v_mag=np.abs(v), v_ang=np.angle(v),
            boundary_voltages=v[self.boundary_pos], slack_p=s_ref.real,
            slack_q=s_ref.imag, iterations=it, converged=ok, max_mismatch=norm,
        )


def solve_region_power_flow(region: RegionGrid, boundary_p, boundary_q, slack_angle: float,
                            start=None, tol: float = TOL_REGION,
                            max_iter: int = MAX_ITER) -> RegionSolution:
    return RegionSolver(region, tol, max_iter).solve(boundary_p, boundary_q, slack_angle, start)


# ------------------------------------------------------------------ flows

def branch_flows(branches: Iterable[Branch], voltage: Mapping[int, complex]):
    """Complex power entering each branch at its from and to ends."""
    s_from, s_to = [], []
    for br in branches:
        try:
            vf, vt = voltage[br.from_bus], voltage[br.to_bus]
        except KeyError as exc:
            raise MissingVoltageError(exc.args[0]) from None
        yff, yft, ytf, ytt = branch_admittances(br)
        s_from.append(vf * np.conj(yff * vf + yft * vt))
        s_to.append(vt * np.conj(ytf * vf + ytt * vt))
    return np.array(s_from, dtype=complex), np.array(s_to, dtype=complex)


def evaluate_link_injections(link: LinkPartition, boundary_voltages: Mapping[int, Sequence[complex]],
                             boundary_map: Mapping[int, Sequence[int]]):
    """Power flowing from each boundary bus into its incident link branches.

    Returns ``{region: (P, Q)}`` ordered like ``boundary_map[region]``; a
    consistent global state has ``P_B + P = 0`` at every boundary bus.
    """
    voltage = {}
    for region, ids in boundary_map.items():
        if region not in boundary_voltages:
            raise MissingVoltageError(f"no boundary voltages for region {region}")
        vals = boundary_voltages[region]
        if len(vals) != len(ids):
            raise MissingVoltageError(f"region {region}: {len(vals)} voltages for {len(ids)} buses")
        voltage.update(zip(ids, vals))
    s_from, s_to = branch_flows(link.branches, voltage)
    acc = {bus: 0j for bus in voltage}
    for br, sf, st in zip(link.branches, s_from, s_to):
        acc[br.from_bus] += sf
        acc[br.to_bus] += st
    out = {}
    for region, ids in boundary_map.items():
        s = np.array([acc[b] for b in ids], dtype=complex)
        out[region] = (s.real, s.imag)
    return out


# ------------------------------------------------------------- centralized

@dataclass
class CentralizedSolution:
    bus_ids: list[int]
    v_mag: np.ndarray
    v_ang: np.ndarray
    iterations: int
    converged: bool
    max_mismatch: float

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def voltage_map(self) -> dict[int, complex]:
        return dict(zip(self.bus_ids, self.voltage))


def _case_solver(case: GridCase, dominant_slack: int | None):
    ref_id = case.slack_bus if dominant_slack is None else dominant_slack
    ref, pv, pq = _bus_types(case.buses, ref_id)
    if ref is None:
        raise KeyError(f"reference bus {ref_id} not in case")
    return NewtonSolver(build_admittance_matrix(case), ref, pv, pq)


def solve_centralized_power_flow(case: GridCase, dominant_slack: int | None = None,
                                 tol: float = TOL_REGION, max_iter: int = MAX_ITER,
                                 start=None) -> CentralizedSolution:
    """Newton-Raphson on the unpartitioned case.

    Only ``dominant_slack`` (default: the case's Slack bus) is a reference;
    every other Slack-kind bus is held as PV at its scheduled active power.
    """
    solver = _case_solver(case, dominant_slack)
    ref_bus = case.buses[solver.ref]
    v_set = np.array([b.v_mag if b.kind != "PQ" else 1.0 for b in case.buses])
    if start is None:
        v0 = v_set * np.exp(1j * ref_bus.v_ang)
    else:
        v0 = np.array(start, dtype=complex)
    s_spec = np.array([complex(b.p_inj, b.q_inj) for b in case.buses])
    v, ok, it, norm = solver.solve(s_spec, v0, tol, max_iter)
    sol = CentralizedSolution(case.bus_ids, np.abs(v), np.angle(v), it, ok, norm)
    if not ok:
        raise NonConvergence(f"centralized power flow of {case.name!r} did not converge "
                             f"(mismatch {norm:.3g} after {it} iterations)", sol)
    return sol


def full_mismatch(case: GridCase, voltage: Mapping[int, complex] | np.ndarray,
                  dominant_slack: int | None = None) -> np.ndarray:
    """Centralized mismatch vector (P at non-reference buses, Q at PQ buses)."""
    solver = _case_solver(case, dominant_slack)
    if isinstance(voltage, Mapping):
        v = np.array([voltage[b] for b in case.bus_ids], dtype=complex)
    else:
        v = np.asarray(voltage, dtype=complex)
    s_spec = np.array([complex(b.p_inj, b.q_inj) for b in case.buses])
    return solver.mismatch(v, s_spec)


# --------------------------------------------------------------- limits

@dataclass(frozen=True)
class OperatingLimits:
    branch_p_max: Mapping[int, float]
    bus_v_limits: Mapping[int, tuple[float, float]]

    @classmethod
    def from_case(cls, case: GridCase) -> "OperatingLimits":
        return cls(
            {br.id: br.p_max for br in case.branches if br.p_max is not None},
            {b.id: (b.v_min, b.v_max) for b in case.buses},
        )


VIOLATION_KINDS = ("BranchActiveFlow", "VoltageHigh", "VoltageLow")


@dataclass(frozen=True)
class Violation:
    kind: str
    element_id: int
    region: int
    value: float
    limit: float
    contingency: int | None = None

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.kind, self.element_id, self.region)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "element": self.element_id, "region": self.region,
                "value": self.value, "limit": self.limit, "contingency": self.contingency}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Violation":
        return cls(d["kind"], int(d["element"]), int(d["region"]), float(d["value"]),
                   float(d["limit"]), d.get("contingency"))


def check_violations(voltage: Mapping[int, complex], branches: Iterable[Branch],
                     limits: OperatingLimits, region: int | Mapping[int, int],
                     contingency: int | None = None) -> list[Violation]:
    """Flow and voltage violations over the buses in ``voltage`` and the
    given in-service ``branches``.

    ``region`` is either a fixed region index or a map from element id to
    region; flows are judged on the larger of the two end magnitudes.
    """
    def region_of(element, table):
        if isinstance(region, Mapping):
            return region[table][element]
        return region

    found = []
    branches = [br for br in branches if br.id in limits.branch_p_max]
    if branches:
        s_from, s_to = branch_flows(branches, voltage)
        for br, sf, st in zip(branches, s_from, s_to):
            flow = float(max(abs(sf.real), abs(st.real)))
            limit = limits.branch_p_max[br.id]
            if flow > limit:
                found.append(Violation("BranchActiveFlow", br.id, region_of(br.id, "branch"),
                                       flow, limit, contingency))
    for bus_id in sorted(voltage):
        if bus_id not in limits.bus_v_limits:
            continue
        vmin, vmax = limits.bus_v_limits[bus_id]
        vm = float(abs(voltage[bus_id]))
        if vm > vmax:
            found.append(Violation("VoltageHigh", bus_id, region_of(bus_id, "bus"), vm, vmax, contingency))
        elif vm < vmin:
            found.append(Violation("VoltageLow", bus_id, region_of(bus_id, "bus"), vm, vmin, contingency))
    found.sort(key=lambda v: (v.element_id, VIOLATION_KINDS.index(v.kind)))
    return found
