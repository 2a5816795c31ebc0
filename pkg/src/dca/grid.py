"""Grid cases: parsing, validation, partitioning into regions, admittance
matrices and branch outages.

All quantities are held in per-unit on the case MVA base. Buses and branches
are kept sorted by id so that every derived vector layout is deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Mapping, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

BUS_KINDS = ("PQ", "PV", "Slack")


class CaseError(ValueError):
    pass


class SchemaError(CaseError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class BusReferenceError(CaseError):
    def __init__(self, bus_id, where: str):
        super().__init__(f"{where} references unknown bus {bus_id}")
        self.bus_id = bus_id


class ConnectivityError(CaseError):
    pass


class ZeroImpedanceError(CaseError):
    pass


class UnknownBranchError(KeyError):
    pass


class PartitionError(ValueError):
    pass


class IslandedRegionError(PartitionError):
    pass


class SlackError(PartitionError):
    pass


class SpecMismatchError(PartitionError):
    pass


class BoundaryTypeError(PartitionError):
    """A bus incident to a link branch is not a PQ bus."""


@dataclass(frozen=True)
class Bus:
    id: int
    name: str
    kind: str
    base_kv: float
    v_mag: float
    v_ang: float
    p_inj: float
    q_inj: float
    v_min: float
    v_max: float
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    p_max: float | None = None
    circuit_id: int = 1

    def other_end(self, bus_id: int) -> int:
        return self.to_bus if bus_id == self.from_bus else self.from_bus


@dataclass(frozen=True)
class GridCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def branch(self, branch_id: int) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise UnknownBranchError(branch_id)

    @property
    def slack_bus(self) -> int:
        slacks = [b.id for b in self.buses if b.kind == "Slack"]
        if len(slacks) != 1:
            raise SlackError(f"case {self.name!r} has {len(slacks)} slack buses")
        return slacks[0]


@dataclass(frozen=True)
class PartitionSpec:
    region_of_bus: Mapping[int, int]
    link_branch_ids: tuple[int, ...]
    dominant_slack_bus: int
    slack_bus_of_region: Mapping[int, int]

    @property
    def region_indices(self) -> list[int]:
        return sorted(set(self.region_of_bus.values()))


@dataclass(frozen=True)
class RegionGrid:
    region_index: int
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    boundary_bus_ids: tuple[int, ...]
    slack_bus: int
    is_dominant: bool
    base_mva: float = 100.0

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.id == self.slack_bus)


@dataclass(frozen=True)
class LinkPartition:
    branches: tuple[Branch, ...]
    # branch id -> ((region, bus) at from end, (region, bus) at to end)
    end_map: Mapping[int, tuple[tuple[int, int], tuple[int, int]]]


@dataclass(frozen=True)
class PartitionedSystem:
    case: GridCase
    spec: PartitionSpec
    regions: tuple[RegionGrid, ...]
    link_partition: LinkPartition
    boundary_map: Mapping[int, tuple[int, ...]]
    outaged: frozenset = field(default_factory=frozenset)

    def region(self, index: int) -> RegionGrid:
        for r in self.regions:
            if r.region_index == index:
                return r
        raise KeyError(index)

    @property
    def dominant_region(self) -> int:
        return next(r.region_index for r in self.regions if r.is_dominant)

    def region_of_branch(self, branch_id: int) -> int | None:
        """Owning region of an in-service branch, ``None`` for link branches."""
        for r in self.regions:
            if any(br.id == branch_id for br in r.branches):
                return r.region_index
        if any(br.id == branch_id for br in self.link_partition.branches):
            return None
        raise UnknownBranchError(branch_id)


@dataclass(frozen=True)
class Islanding:
    """Outcome of an outage that splits a region or the interconnection."""

    branch_id: int
    region: int | None
    isolated_bus_ids: tuple[int, ...]


# ---------------------------------------------------------------- parsing

def _load_json(source) -> object:
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from exc


def _get(obj: dict, key: str, path: str, types, required=True, default=None):
    if key not in obj or obj[key] is None:
        if required:
            raise SchemaError(f"{path}.{key}", "missing field")
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise SchemaError(f"{path}.{key}", f"expected {types}, got {type(value).__name__}")
    return value


_NUM = (int, float)


def parse_case(source: Union[bytes, str, IO]) -> GridCase:
    """Parse a case-json document into a per-unit :class:`GridCase`."""
    doc = _load_json(source)
    if not isinstance(doc, dict):
        raise SchemaError("$", "top level must be an object")
    name = _get(doc, "name", "$", str)
    base = float(_get(doc, "base_mva", "$", _NUM))
    if base <= 0:
        raise SchemaError("$.base_mva", "must be positive")
    raw_buses = _get(doc, "buses", "$", list)
    raw_branches = _get(doc, "branches", "$", list)

    buses = []
    for i, rb in enumerate(raw_buses):
        path = f"$.buses[{i}]"
        if not isinstance(rb, dict):
            raise SchemaError(path, "expected object")
        kind = _get(rb, "kind", path, str)
        if kind not in BUS_KINDS:
            raise SchemaError(f"{path}.kind", f"unknown bus kind {kind!r}")
        v_min = float(_get(rb, "v_min", path, _NUM, False, 0.9))
        v_max = float(_get(rb, "v_max", path, _NUM, False, 1.1))
        if v_min > v_max:
            raise SchemaError(path, "v_min exceeds v_max")
        v_mag = float(_get(rb, "v_mag", path, _NUM, False, 1.0))
        if kind != "PQ" and v_mag <= 0:
            raise SchemaError(f"{path}.v_mag", "voltage-controlled bus needs v_mag > 0")
        buses.append(Bus(
            id=_get(rb, "id", path, int),
            name=str(_get(rb, "name", path, str, False, "")),
            kind=kind,
            base_kv=float(_get(rb, "base_kv", path, _NUM, False, 0.0)),
            v_mag=v_mag,
            v_ang=math.radians(float(_get(rb, "v_ang_deg", path, _NUM, False, 0.0))),
            p_inj=float(_get(rb, "p_mw", path, _NUM, False, 0.0)) / base,
            q_inj=float(_get(rb, "q_mvar", path, _NUM, False, 0.0)) / base,
            v_min=v_min,
            v_max=v_max,
            shunt_g=float(_get(rb, "g_shunt_mw", path, _NUM, False, 0.0)) / base,
            shunt_b=float(_get(rb, "b_shunt_mvar", path, _NUM, False, 0.0)) / base,
        ))
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise SchemaError("$.buses", f"duplicate bus ids {dup}")
    known = set(ids)

    branches = []
    for i, rb in enumerate(raw_branches):
        path = f"$.branches[{i}]"
        if not isinstance(rb, dict):
            raise SchemaError(path, "expected object")
        bid = _get(rb, "id", path, int)
        f, t = _get(rb, "from", path, int), _get(rb, "to", path, int)
        for end in (f, t):
            if end not in known:
                raise BusReferenceError(end, f"branch {bid}")
        r = float(_get(rb, "r_pu", path, _NUM))
        x = float(_get(rb, "x_pu", path, _NUM))
        if r == 0 and x == 0:
            raise ZeroImpedanceError(f"branch {bid} has zero impedance")
        tap = float(_get(rb, "tap", path, _NUM, False, 1.0))
        if tap <= 0:
            raise SchemaError(f"{path}.tap", "tap ratio must be positive")
        p_max = _get(rb, "p_max_mw", path, _NUM, False, None)
        branches.append(Branch(
            id=bid, from_bus=f, to_bus=t, r=r, x=x,
            b_charging=float(_get(rb, "b_pu", path, _NUM, False, 0.0)),
            tap_ratio=tap,
            p_max=None if p_max is None else float(p_max) / base,
            circuit_id=_get(rb, "circuit", path, int, False, 1),
        ))
    bids = [b.id for b in branches]
    if len(set(bids)) != len(bids):
        raise SchemaError("$.branches", "duplicate branch ids")

    case = GridCase(name=name, base_mva=base,
                    buses=tuple(sorted(buses, key=lambda b: b.id)),
                    branches=tuple(sorted(branches, key=lambda b: b.id)))
    if not _is_connected(case.bus_ids, case.branches):
        raise ConnectivityError(f"case {name!r} is not connected")
    return case


def case_to_dict(case: GridCase) -> dict:
    base = case.base_mva
    return {
        "name": case.name,
        "base_mva": base,
        "buses": [{
            "id": b.id, "name": b.name, "kind": b.kind, "base_kv": b.base_kv,
            "v_mag": b.v_mag, "v_ang_deg": math.degrees(b.v_ang),
            "p_mw": b.p_inj * base, "q_mvar": b.q_inj * base,
            "v_min": b.v_min, "v_max": b.v_max,
            "g_shunt_mw": b.shunt_g * base, "b_shunt_mvar": b.shunt_b * base,
        } for b in case.buses],
        "branches": [{
            "id": br.id, "from": br.from_bus, "to": br.to_bus,
            "r_pu": br.r, "x_pu": br.x, "b_pu": br.b_charging, "tap": br.tap_ratio,
            "p_max_mw": None if br.p_max is None else br.p_max * base,
            "circuit": br.circuit_id,
        } for br in case.branches],
    }


def dump_case(case: GridCase) -> str:
    return json.dumps(case_to_dict(case), indent=1)


def parse_partition(source) -> PartitionSpec:
    doc = _load_json(source)
    if not isinstance(doc, dict):
        raise SchemaError("$", "top level must be an object")
    regions = _get(doc, "regions", "$", dict)
    links = _get(doc, "links", "$", list)
    dominant = _get(doc, "dominant_slack", "$", int)
    slacks = _get(doc, "region_slacks", "$", dict)
    try:
        region_of_bus = {int(k): int(v) for k, v in regions.items()}
        slack_of = {int(k): int(v) for k, v in slacks.items()}
        link_ids = tuple(sorted(int(b) for b in links))
    except (TypeError, ValueError) as exc:
        raise SchemaError("$", f"ids must be integers: {exc}") from exc
    return PartitionSpec(region_of_bus, link_ids, dominant, slack_of)


def partition_to_dict(spec: PartitionSpec) -> dict:
    return {
        "regions": {str(k): v for k, v in sorted(spec.region_of_bus.items())},
        "links": list(spec.link_branch_ids),
        "dominant_slack": spec.dominant_slack_bus,
        "region_slacks": {str(k): v for k, v in sorted(spec.slack_bus_of_region.items())},
    }


# ------------------------------------------------------------ topology

def _components(bus_ids: list[int], branches: Iterable[Branch]) -> list[list[int]]:
    pos = {b: i for i, b in enumerate(bus_ids)}
    rows, cols = [], []
    for br in branches:
        rows.append(pos[br.from_bus])
        cols.append(pos[br.to_bus])
    n = len(bus_ids)
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    comps: dict[int, list[int]] = {}
    for bus, lab in zip(bus_ids, labels):
        comps.setdefault(int(lab), []).append(bus)
    return sorted(comps.values(), key=lambda c: c[0])


def _is_connected(bus_ids, branches) -> bool:
    return len(bus_ids) == 0 or len(_components(list(bus_ids), branches)) == 1


def partition_system(case: GridCase, spec: PartitionSpec) -> PartitionedSystem:
    """Split ``case`` into region grids and a link partition."""
    region_of = dict(spec.region_of_bus)
    missing = [b for b in case.bus_ids if b not in region_of]
    if missing:
        raise SpecMismatchError(f"buses without region assignment: {missing}")
    extra = sorted(set(region_of) - set(case.bus_ids))
    if extra:
        raise BusReferenceError(extra[0], "partition")
    indices = sorted(set(region_of.values()))
    if len(indices) < 2:
        raise SpecMismatchError("a partition needs at least two regions")

    declared = set(spec.link_branch_ids)
    known_branches = {br.id for br in case.branches}
    for bid in declared - known_branches:
        raise UnknownBranchError(bid)
    internal: dict[int, list[Branch]] = {i: [] for i in indices}
    links: list[Branch] = []
    for br in case.branches:
        rf, rt = region_of[br.from_bus], region_of[br.to_bus]
        if rf == rt:
            if br.id in declared:
                raise SpecMismatchError(f"declared link branch {br.id} lies inside region {rf}")
            internal[rf].append(br)
        else:
            if br.id not in declared:
                raise SpecMismatchError(f"branch {br.id} crosses regions {rf}/{rt} but is not declared a link")
            links.append(br)

    boundary: dict[int, set[int]] = {i: set() for i in indices}
    end_map = {}
    for br in links:
        rf, rt = region_of[br.from_bus], region_of[br.to_bus]
        boundary[rf].add(br.from_bus)
        boundary[rt].add(br.to_bus)
        end_map[br.id] = ((rf, br.from_bus), (rt, br.to_bus))

    if spec.dominant_slack_bus not in spec.slack_bus_of_region.values():
        raise SlackError(f"dominant slack {spec.dominant_slack_bus} is not a regional slack")

    regions = []
    for i in indices:
        if i not in spec.slack_bus_of_region:
            raise SlackError(f"region {i} has no slack assignment")
        slack = spec.slack_bus_of_region[i]
        if region_of.get(slack) != i:
            raise SlackError(f"slack bus {slack} of region {i} is not in the region")
        buses = [b for b in case.buses if region_of[b.id] == i]
        slack_bus = next(b for b in buses if b.id == slack)
        if slack_bus.kind == "PQ":
            raise SlackError(f"slack bus {slack} of region {i} is a PQ bus")
        for bid in sorted(boundary[i]):
            if case.bus(bid).kind != "PQ":
                raise BoundaryTypeError(f"boundary bus {bid} of region {i} is {case.bus(bid).kind}, not PQ")
        if slack in boundary[i]:
            raise SlackError(f"slack bus {slack} is a boundary bus")
        comps = _components([b.id for b in buses], internal[i])
        if len(comps) > 1:
            raise IslandedRegionError(f"region {i} is internally disconnected: {comps}")
        regions.append(RegionGrid(
            region_index=i, buses=tuple(buses), branches=tuple(internal[i]),
            boundary_bus_ids=tuple(sorted(boundary[i])), slack_bus=slack,
            is_dominant=(slack == spec.dominant_slack_bus), base_mva=case.base_mva,
        ))
    link = LinkPartition(branches=tuple(links), end_map=end_map)
    return PartitionedSystem(
        case=case, spec=spec, regions=tuple(regions), link_partition=link,
        boundary_map={r.region_index: r.boundary_bus_ids for r in regions},
    )


def apply_outage(system: PartitionedSystem, branch_id: int) -> PartitionedSystem | Islanding:
    """Remove one in-service branch; report :class:`Islanding` when the outage
    splits a region or cuts a region off from the interconnection.

    The boundary map is left unchanged so that the boundary vector layout
    stays fixed for the session.
    """
    owner = system.region_of_branch(branch_id)
    if owner is not None:
        region = system.region(owner)
        kept = tuple(br for br in region.branches if br.id != branch_id)
        comps = _components(region.bus_ids, kept)
        if len(comps) > 1:
            isolated = tuple(sorted(b for c in comps if region.slack_bus not in c for b in c))
            return Islanding(branch_id, owner, isolated)
        regions = tuple(replace(r, branches=kept) if r.region_index == owner else r
                        for r in system.regions)
        link = system.link_partition
    else:
        kept_links = tuple(br for br in system.link_partition.branches if br.id != branch_id)
        # regions must stay connected to each other through the remaining links
        idx = [r.region_index for r in system.regions]
        pseudo = [Branch(id=br.id, from_bus=system.link_partition.end_map[br.id][0][0],
                         to_bus=system.link_partition.end_map[br.id][1][0], r=0.0, x=1.0)
                  for br in kept_links]
        comps = _components(idx, pseudo)
        if len(comps) > 1:
            dom = system.dominant_region
            cut = [r for c in comps if dom not in c for r in c]
            isolated = tuple(sorted(b for r in cut for b in system.region(r).bus_ids))
            return Islanding(branch_id, None, isolated)
        regions = system.regions
        link = LinkPartition(kept_links, {k: v for k, v in system.link_partition.end_map.items()
                                          if k != branch_id})
    return replace(system, regions=regions, link_partition=link,
                   outaged=system.outaged | {branch_id})


# ------------------------------------------------------------ admittance

def branch_admittances(br: Branch) -> tuple[complex, complex, complex, complex]:
    """Return (y_ff, y_ft, y_tf, y_tt) of the pi model with from-side tap."""
    z = complex(br.r, br.x)
    if z == 0:
        raise ZeroImpedanceError(f"branch {br.id} has zero impedance")
    ys = 1.0 / z
    bc = 0.5j * br.b_charging
    t = br.tap_ratio
    return (ys + bc) / (t * t), -ys / t, -ys / t, ys + bc


def build_admittance_matrix(grid: RegionGrid | GridCase) -> sp.csr_matrix:
    """Bus admittance matrix with rows/columns in ``grid.buses`` order."""
    ids = grid.bus_ids
    if not ids:
        raise ValueError("grid has no buses")
    pos = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    rows, cols, vals = [], [], []
    for i, bus in enumerate(grid.buses):
        rows.append(i)
        cols.append(i)
        vals.append(complex(bus.shunt_g, bus.shunt_b))
    for br in grid.branches:
        f, t = pos[br.from_bus], pos[br.to_bus]
        yff, yft, ytf, ytt = branch_admittances(br)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))
    return y.tocsr()


def case_fingerprint(case: GridCase) -> str:
    import hashlib
    blob = json.dumps(case_to_dict(case), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
