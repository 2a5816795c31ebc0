"""Critical-contingency screening by electrical distance to boundary buses.

Each region ranks its nodes by distance to the nearest boundary bus, groups
its lines under the nearest-ranked endpoint, and sweeps the groups in order
until enough consecutive groups bring no new violation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grid import RegionGrid, build_admittance_matrix

K_STOP = 2


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class UnknownNodeError(KeyError):
    pass


@dataclass(frozen=True)
class ImpedanceMatrix:
    """Slack-referenced nodal impedance matrix of one region."""

    node_ids: tuple[int, ...]
    slack_bus: int
    z: np.ndarray

    def index(self, node: int) -> int:
        try:
            return self.node_ids.index(node)
        except ValueError:
            raise UnknownNodeError(node) from None


def build_impedance_matrix(region: RegionGrid) -> ImpedanceMatrix:
    y = build_admittance_matrix(region).toarray()
    ids = region.bus_ids
    keep = [i for i, b in enumerate(ids) if b != region.slack_bus]
    y_red = y[np.ix_(keep, keep)]
    try:
        z = np.linalg.inv(y_red)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"region {region.region_index}: {exc}") from exc
    if not np.all(np.isfinite(z)) or np.linalg.cond(y_red) > 1e14:
        raise SingularMatrixError(f"region {region.region_index} admittance matrix is singular")
    return ImpedanceMatrix(tuple(ids[i] for i in keep), region.slack_bus, z)


def pair_distance(zm: ImpedanceMatrix, i: int, j: int, thevenin: bool = True) -> float:
    """Impedance magnitude between nodes ``i`` and ``j``."""
    if i == j:
        return 0.0
    if zm.slack_bus in (i, j):
        other = j if i == zm.slack_bus else i
        k = zm.index(other)
        return float(abs(zm.z[k, k]))
    a, b = zm.index(i), zm.index(j)
    if thevenin:
        return float(abs(zm.z[a, a] + zm.z[b, b] - 2 * zm.z[a, b]))
    return float(abs(zm.z[a, b]))


def electrical_distance(zm: ImpedanceMatrix, node: int, boundary: Iterable[int],
                        thevenin: bool = True) -> float:
    boundary = list(boundary)
    if not boundary:
        raise ValueError("boundary set is empty")
    if node != zm.slack_bus:
        zm.index(node)
    return min(pair_distance(zm, node, j, thevenin) for j in boundary)


@dataclass(frozen=True)
class DistanceRanking:
    region: int
    entries: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class ContingencyGroup:
    region: int
    anchor: int
    distance: float
    branch_ids: tuple[int, ...]
    to_nodes: tuple[str, ...] = ()


def rank_and_group(region: RegionGrid, zm: ImpedanceMatrix | None = None,
                   boundary: Sequence[int] | None = None, thevenin: bool = True):
    """Rank region nodes by distance to the boundary and group the region's
    lines under their earliest-ranked endpoint. Nodes whose lines were all
    claimed earlier yield no group."""
    zm = zm or build_impedance_matrix(region)
    boundary = list(region.boundary_bus_ids if boundary is None else boundary)
    dist = {b: electrical_distance(zm, b, boundary, thevenin) for b in region.bus_ids}
    for b in boundary:
        dist[b] = 0.0
    entries = tuple(sorted(dist.items(), key=lambda kv: (kv[1], kv[0])))

    pair_count: dict[tuple[int, int], int] = {}
    for br in region.branches:
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
        pair_count[key] = pair_count.get(key, 0) + 1
    claimed: set[int] = set()
    groups = []
    for node, d in entries:
        members = [br for br in region.branches
                   if br.id not in claimed and node in (br.from_bus, br.to_bus)]
        if not members:
            continue
        members.sort(key=lambda br: br.id)
        claimed.update(br.id for br in members)
        labels = []
        for br in members:
            key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
            mark = "*" if pair_count[key] > 1 else ""
            labels.append(f"{br.other_end(node)}{mark}")
        groups.append(ContingencyGroup(region.region_index, node, d,
                                       tuple(br.id for br in members), tuple(labels)))
    return DistanceRanking(region.region_index, entries), groups


@dataclass
class CcsState:
    k_stop: int = K_STOP
    cumulative: set = field(default_factory=set)
    counters: dict = field(default_factory=dict)
    stopped: dict = field(default_factory=dict)
    trace: dict = field(default_factory=dict)

    def is_stopped(self, region: int) -> bool:
        return self.stopped.get(region, False)


def should_stop(state: CcsState, region: int, violations: Iterable) -> bool:
    """Merge one evaluated group's violations and decide whether the
    region's sweep stops. Items are violation keys or objects with ``key``."""
    keys = {getattr(v, "key", v) for v in violations}
    new = keys - state.cumulative
    state.cumulative |= keys
    if new:
        state.counters[region] = 0
    else:
        state.counters[region] = state.counters.get(region, 0) + 1
    state.trace.setdefault(region, []).append(state.counters[region])
    if state.counters[region] >= state.k_stop:
        state.stopped[region] = True
    return state.is_stopped(region)
