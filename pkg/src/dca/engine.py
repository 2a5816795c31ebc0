"""Distributed N-1 contingency analysis: orchestration and reports."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .boundary import BoundaryLayout, RegionSolveError, boundary_vector_from_solution, solve_distributed
from .grid import (GridCase, Islanding, PartitionedSystem, apply_outage, case_fingerprint,
                   parse_case, parse_partition, partition_system)
from .jfng import JfngParams, Preconditioner, jfng_solve
from .oracle import LINK_REGION, exhaustive_n1, solve_base, violation_set
from .powerflow import OperatingLimits, Violation
from .scheduler import LanePool
from .screening import CcsState, ContingencyGroup, rank_and_group, should_stop
from .session import (ComputationServer, CoordinatorSession, DistributedResidual, ProtocolError,
                      RemoteError, SlotTimeout, link_violations)
from .transport import (ConnectionLost, LatencyModel, TcpListener, in_process_pair, tcp_connect)

log = logging.getLogger("dca.engine")

REPORT_SCHEMA = "dca-report/1"
WARM_POLICIES = ("group", "base", "off")
BASE_SLOT = 1
RETRY_OFFSET = 1 << 20


class ConfigError(ValueError):
    pass


@dataclass
class DcaConfig:
    case_path: str
    partition_path: str
    limits_path: str | None = None
    params: JfngParams = field(default_factory=JfngParams)
    workers: int = 1
    k_stop: int = 2
    warm_start: str = "group"
    transport: str = "inprocess"
    peers: Mapping[int, str] | None = None
    latency_mean_ms: float = 0.0
    seed: int = 0
    out_dir: str | None = None
    mode: str = "screen"
    thevenin: bool = True
    handshake_timeout: float = 10.0
    slot_timeout: float = 30.0
    # test hooks, never part of the configuration identity
    tap: Callable | None = field(default=None, repr=False, compare=False)
    server_overrides: Mapping[int, dict] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("worker count D must be >= 1")
        if self.k_stop < 1:
            raise ConfigError("K_stop must be >= 1")
        if self.warm_start not in WARM_POLICIES:
            raise ConfigError(f"warm_start must be one of {WARM_POLICIES}")
        if self.transport not in ("inprocess", "tcp"):
            raise ConfigError("transport must be 'inprocess' or 'tcp'")
        if self.mode not in ("screen", "exhaustive"):
            raise ConfigError("mode must be 'screen' or 'exhaustive'")
        for p in (self.case_path, self.partition_path, self.limits_path):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"no such file: {p}")

    def identity(self) -> dict:
        """Fields that determine the computed result."""
        return {"params": self.params.to_dict(), "k_stop": self.k_stop,
                "warm_start": self.warm_start, "mode": self.mode, "thevenin": self.thevenin,
                "seed": self.seed}

    def hash(self) -> str:
        return _digest(self.identity())


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ------------------------------------------------------------------ limits

def load_limits(case: GridCase, path: str | None = None) -> OperatingLimits:
    """Limits from the case, optionally overridden by a JSON file of the form
    ``{"branch_p_max_mw": {id: mw}, "bus_v": {id: [v_min, v_max]}}``."""
    base = OperatingLimits.from_case(case)
    if path is None:
        return base
    doc = json.loads(Path(path).read_text())
    flows = dict(base.branch_p_max)
    for k, mw in doc.get("branch_p_max_mw", {}).items():
        if mw is None:
            flows.pop(int(k), None)
        else:
            flows[int(k)] = float(mw) / case.base_mva
    volts = dict(base.bus_v_limits)
    for k, (lo, hi) in doc.get("bus_v", {}).items():
        volts[int(k)] = (float(lo), float(hi))
    return OperatingLimits(flows, volts)


def limits_hash(limits: OperatingLimits) -> str:
    return _digest({"branch": sorted((k, repr(v)) for k, v in limits.branch_p_max.items()),
                    "bus": sorted((k, repr(a), repr(b)) for k, (a, b) in limits.bus_v_limits.items())})


def load_system(case_path, partition_path) -> PartitionedSystem:
    case = parse_case(Path(case_path).read_bytes())
    spec = parse_partition(Path(partition_path).read_bytes())
    return partition_system(case, spec)


# ------------------------------------------------------------------ results

@dataclass
class ContingencyResult:
    branch_id: int
    label: str
    region: int
    group_anchor: int | None
    status: str
    violations: list[Violation] = field(default_factory=list)
    outer_iterations: int = 0
    inner_iterations: int = 0
    residual_evaluations: int = 0
    final_norm: float | None = None
    start: str = ""
    detail: str = ""
    trace: list = field(default_factory=list)
    # timing, excluded from the report body
    lane: int | None = None
    wall_s: float = 0.0
    solution: np.ndarray | None = field(default=None, repr=False)
    preconditioner: Preconditioner | None = field(default=None, repr=False)

    @property
    def total_iterations(self) -> int:
        return self.outer_iterations + self.inner_iterations

    def to_dict(self) -> dict:
        return {"id": self.branch_id, "label": self.label, "region": self.region,
                "group_anchor": self.group_anchor, "status": self.status,
                "violations": [_viol_dict(v) for v in self.violations],
                "outer_iterations": self.outer_iterations,
                "inner_iterations": self.inner_iterations,
                "total_iterations": self.total_iterations,
                "residual_evaluations": self.residual_evaluations,
                "final_norm": self.final_norm, "start": self.start, "detail": self.detail}


def _viol_dict(v: Violation) -> dict:
    return {"kind": v.kind, "element": v.element_id, "region": v.region,
            "value": v.value, "limit": v.limit, "contingency": v.contingency}


def _viol_sort(vs):
    return sorted(vs, key=lambda v: (v.region, v.element_id, v.kind, v.contingency or 0))


def key_str(key) -> str:
    kind, element, region = key
    return f"{kind}:{element}@{region}"


@dataclass
class DcaReport:
    body: dict
    timing: dict
    results: list[ContingencyResult] = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)

    @property
    def aborted(self) -> bool:
        return bool(self.body.get("aborted"))

    @property
    def violation_keys(self) -> set[tuple[str, int, int]]:
        return {(v["kind"], v["element"], v["region"]) for v in self.body.get("violations", [])}

    def body_json(self) -> str:
        return json.dumps(self.body, sort_keys=True, indent=1)

    def to_json(self) -> str:
        return json.dumps(dict(self.body, timing=self.timing), sort_keys=True, indent=1)

    def exit_code(self) -> int:
        if self.aborted:
            return 2
        return 1 if self.body.get("violations") else 0


# ------------------------------------------------------------------ engine

class _Cluster:
    """Region servers plus the coordinator session, in-process or over TCP."""

    def __init__(self, cfg: DcaConfig, system: PartitionedSystem, layout: BoundaryLayout,
                 limits: OperatingLimits, lhash: str):
        self.cfg = cfg
        self.servers: dict[int, ComputationServer] = {}
        self.listeners: list[TcpListener] = []
        conns = {}
        regions = [r.region_index for r in system.regions]
        latency = LatencyModel(cfg.latency_mean_ms / 1000.0, cfg.seed)
        for r in regions:
            extra = dict(cfg.server_overrides.get(r, {}))
            if cfg.transport == "inprocess":
                c_end, s_end = in_process_pair(latency, f"region{r}", cfg.tap)
                self.servers[r] = ComputationServer(system, r, s_end, limits, lhash, **extra).start()
                conns[r] = c_end
            elif cfg.peers:
                if r not in cfg.peers:
                    raise ConnectionLost(f"no address configured for region {r}")
                try:
                    conns[r] = tcp_connect(cfg.peers[r], cfg.handshake_timeout, cfg.tap,
                                           name=f"region{r}:c")
                except ConnectionLost as exc:
                    raise ConnectionLost(f"region {r} unreachable: {exc}") from exc
            else:
                lst = TcpListener("127.0.0.1:0")
                self.listeners.append(lst)
                srv_box = {}

                def accept(lst=lst, r=r, extra=extra, box=srv_box):
                    conn = lst.accept(cfg.handshake_timeout, cfg.tap)
                    conn.name = f"region{r}:s"
                    box["srv"] = ComputationServer(system, r, conn, limits, lhash, **extra)
                    self.servers[r] = box["srv"]
                    box["srv"].serve()

                threading.Thread(target=accept, daemon=True).start()
                conns[r] = tcp_connect(lst.address, cfg.handshake_timeout, cfg.tap, name=f"region{r}:c")
        init = {"case_fingerprint": case_fingerprint(system.case), "limits_hash": lhash,
                "params": cfg.params.to_dict()}
        self.session = CoordinatorSession(conns, layout, session_id=1, init_body=init,
                                          handshake_timeout=cfg.handshake_timeout,
                                          slot_timeout=cfg.slot_timeout)

    def close(self):
        self.session.shutdown()
        for srv in self.servers.values():
            if srv.thread is not None:
                srv.thread.join(timeout=2.0)
        for lst in self.listeners:
            lst.close()


class DcaEngine:
    def __init__(self, cfg: DcaConfig):
        self.cfg = cfg
        self.system = load_system(cfg.case_path, cfg.partition_path)
        self.layout = BoundaryLayout.from_system(self.system)
        self.limits = load_limits(self.system.case, cfg.limits_path)
        self.lhash = limits_hash(self.limits)
        self.cluster: _Cluster | None = None
        self.pool: LanePool | None = None
        self.results: dict[int, ContingencyResult] = {}
        self.events: list = []
        self.base: ContingencyResult | None = None
        self.stored_x: np.ndarray | None = None
        self.exchange_time = [0.0]
        self._lock = threading.Lock()

    # -- helpers
    def _label(self, branch_id: int) -> str:
        br = self.system.case.branch(branch_id)
        return f"{br.from_bus}-{br.to_bus}({br.circuit_id})"

    def _slot(self, branch_id: int) -> int:
        ids = sorted(br.id for br in self.system.case.branches)
        return 2 + ids.index(branch_id)

    def _cold_starts(self):
        n = self.layout.size
        starts = [(self.layout.flat_vector(), None, "flat")]
        if self.stored_x is not None:
            starts.append((self.stored_x, None, "stored"))
        return [(x, Preconditioner.identity(n) if M is None else M, s) for x, M, s in starts]

    def _stored_vector(self, acks: Mapping[int, dict]) -> np.ndarray:
        v = {}
        for r, ack in acks.items():
            b = ack["boundary"]
            v.update({i: m * np.exp(1j * a) for i, m, a in zip(b["bus_ids"], b["v_mag"], b["v_ang"])})
            v[self.layout.slack_bus[r]] = np.exp(1j * ack["slack_angle"])
        return boundary_vector_from_solution(self.system, self.layout, v)

    # -- one case over the session
    def _solve_slot(self, slot: int, system: PartitionedSystem, outage, kind: str,
                    starts, result: ContingencyResult) -> ContingencyResult:
        session = self.cluster.session
        session.open_slot(slot, outage, kind)
        try:
            res, F, error = None, None, None
            for attempt, (x0, M0, label) in enumerate(starts):
                if attempt:
                    # fresh region state so a failed attempt leaves no trace
                    session.open_slot(slot, outage, kind)
                F = DistributedResidual(session, slot, system)
                t0 = time.perf_counter()
                try:
                    res = jfng_solve(F, x0, M0, self.cfg.params)
                    error = None
                except RegionSolveError as exc:
                    res, error = None, exc
                    result.residual_evaluations += F.evaluations
                    result.detail = str(exc)
                    continue
                finally:
                    with self._lock:
                        self.exchange_time[0] += time.perf_counter() - t0
                result.outer_iterations += res.outer_iterations
                result.inner_iterations += res.inner_iterations
                result.residual_evaluations += res.residual_evaluations
                result.trace = [list(t) for t in res.trace]
                result.final_norm = res.final_norm
                result.start = label
                if res.converged:
                    break
            if res is None:
                result.status = "Errored"
                return result
            if not res.converged:
                result.status = "NonConverged"
                result.detail = res.status
                return result
            if F.last_x is None or not np.array_equal(F.last_x, res.solution):
                F(res.solution)
            viol = session.violations(slot)
            viol += link_violations(system, F.boundary_voltage_map(), self.limits, outage)
            result.status = "Converged"
            result.detail = ""
            result.violations = _viol_sort(viol)
            result.solution = res.solution.copy()
            result.preconditioner = res.preconditioner
            return result
        finally:
            session.close_slot(slot)

    def _contingency(self, branch_id: int, group: ContingencyGroup | None, starts_fn):
        """Lane task for one outage, re-queued once on a lane failure."""
        def task(lane: int) -> ContingencyResult:
            t0 = time.perf_counter()
            owner = self.system.region_of_branch(branch_id)
            region = LINK_REGION if owner is None else owner
            anchor = group.anchor if group else None
            outaged = apply_outage(self.system, branch_id)
            mk = lambda: ContingencyResult(branch_id, self._label(branch_id), region, anchor, "")
            if isinstance(outaged, Islanding):
                r = mk()
                r.status = "Islanding"
                r.detail = "isolates buses " + ",".join(map(str, outaged.isolated_bus_ids))
            else:
                starts, start_label = starts_fn()
                slot = self._slot(branch_id)
                try:
                    r = self._solve_slot(slot, outaged, branch_id, "contingency", starts, mk())
                except (SlotTimeout, RemoteError, ProtocolError) as exc:
                    log.warning("contingency %s failed on lane %d (%s); re-queued", branch_id, lane, exc)
                    try:
                        r = self._solve_slot(slot + RETRY_OFFSET, outaged, branch_id, "contingency",
                                             starts, mk())
                    except (SlotTimeout, RemoteError, ProtocolError) as exc2:
                        r = mk()
                        r.status = "Requeued"
                        r.detail = str(exc2)
                if r.start == "warm":
                    r.start = start_label
            r.lane = lane
            r.wall_s = time.perf_counter() - t0
            with self._lock:
                self.events.append(("start", branch_id, t0))
            return r
        return task

    def _warm(self, source: ContingencyResult | None, label: str):
        if source is not None and source.status == "Converged":
            M = source.preconditioner.copy()
            M.generation += 1
            return [(source.solution.copy(), M, "warm")], label
        return self._cold_starts(), "cold"

    def _run_groups(self, groups: list[ContingencyGroup | None], members: list[list[int]]):
        """Evaluate several groups as one barrier batch.

        With the ``group`` policy each group's first solvable outage starts
        from the base case and the others start from that leader's result,
        so the work runs in two phases.
        """
        policy = self.cfg.warm_start
        base = self.base
        if policy == "off":
            first = [(g, b, lambda: (self._cold_starts(), "cold")) for g, m in zip(groups, members) for b in m]
            return self._batch(first)
        base_start = lambda: self._warm(base, "base")
        if policy == "base":
            return self._batch([(g, b, base_start) for g, m in zip(groups, members) for b in m])
        leaders, rest = [], []
        for g, m in zip(groups, members):
            solvable = [b for b in m if not isinstance(apply_outage(self.system, b), Islanding)]
            lead = solvable[0] if solvable else None
            if lead is not None:
                leaders.append((g, lead, base_start))
            rest.append((g, [b for b in m if b != lead], lead))
        done = {r.branch_id: r for r in self._batch(leaders)}
        followers = []
        for g, bs, lead in rest:
            src = done.get(lead)
            fn = (lambda src=src, lead=lead: self._warm(src, f"leader:{lead}"))
            followers += [(g, b, fn) for b in bs]
        done.update({r.branch_id: r for r in self._batch(followers)})
        return [done[b] for m in members for b in m]

    def _batch(self, items):
        tasks = [self._contingency(b, g, fn) for g, b, fn in items]
        out = self.pool.run_batch(tasks)
        with self._lock:
            self.events.append(("group_barrier", len(out), time.perf_counter()))
        for r in out:
            self.results[r.branch_id] = r
        return out

    # -- workflow
    def _open(self) -> None:
        self.cluster = _Cluster(self.cfg, self.system, self.layout, self.limits, self.lhash)
        acks = self.cluster.session.handshake()
        self.stored_x = self._stored_vector(acks)

    def solve_base_case(self) -> ContingencyResult:
        """Distributed base-case power flow from a cold start."""
        if self.cluster is None:
            self._open()
        base = ContingencyResult(0, "base", LINK_REGION, None, "")
        self.base = self._solve_slot(BASE_SLOT, self.system, None, "base", self._cold_starts(), base)
        return self.base

    def run(self) -> DcaReport:
        t_start = time.perf_counter()
        body = {"schema": REPORT_SCHEMA, "aborted": False,
                "metadata": {"config_hash": self.cfg.hash(), "config": self.cfg.identity(),
                             "case": self.system.case.name,
                             "case_fingerprint": case_fingerprint(self.system.case),
                             "layout_hash": self.layout.hash(), "limits_hash": self.lhash,
                             "boundary_dimension": self.layout.size}}
        screening_rows: list[dict] = []
        try:
            self._open()
            self.pool = LanePool(self.cfg.workers)
            base = self.solve_base_case()
            body["base_case"] = {k: v for k, v in base.to_dict().items()
                                 if k not in ("id", "label", "region", "group_anchor")}
            body["base_case"]["boundary_vector"] = (base.solution.tolist()
                                                    if base.solution is not None else None)
            if base.status != "Converged":
                raise RuntimeError(f"base case did not converge: {base.status} {base.detail}")

            # screening tables
            plan = {}
            for region in self.system.regions:
                ranking, groups = rank_and_group(region, thevenin=self.cfg.thevenin)
                plan[region.region_index] = groups
            link_ids = sorted(br.id for br in self.system.link_partition.branches)

            self.pool.start_clock()
            self.exchange_time[0] = 0.0
            state = CcsState(k_stop=self.cfg.k_stop)
            if self.cfg.mode == "exhaustive":
                all_groups = [g for r in sorted(plan) for g in plan[r]]
                self._run_groups(all_groups + [None], [list(g.branch_ids) for g in all_groups] + [link_ids])
            screening_rows = self._sweep(plan, link_ids, state)
            timings = self.pool.timings()
        except Exception as exc:
            log.error("run aborted: %s", exc)
            body["aborted"] = True
            reason = f"{type(exc).__name__}: {exc}"
            body["abort_reason"] = reason
            if getattr(exc, "region", None) is not None:
                body["abort_region"] = exc.region
            timings = self.pool.timings() if self.pool else None
            if self.cluster is not None:
                self.cluster.session.abort(reason)

        results = [self.results[b] for b in sorted(self.results)]
        body["screening"] = screening_rows
        body["contingencies"] = [r.to_dict() for r in results]
        cumulative = {}
        for r in results:
            for v in r.violations:
                cumulative.setdefault(v.key, v)
        body["violations"] = [{"kind": k[0], "element": k[1], "region": k[2],
                               "first_contingency": cumulative[k].contingency}
                              for k in sorted(cumulative, key=lambda k: (k[2], k[1], k[0]))]
        counts = {}
        for r in results:
            counts[r.status] = counts.get(r.status, 0) + 1
        body["summary"] = {"contingencies": len(results), "status_counts": counts,
                           "violations": len(cumulative)}
        timing = self._timing(timings, time.perf_counter() - t_start, results)
        return DcaReport(body, timing, results, list(self.events) +
                         (timings.events if timings else []))

    def _sweep(self, plan, link_ids, state: CcsState) -> list[dict]:
        """Round-robin group sweep with per-region stopping. In exhaustive
        mode every outage has already been solved and the stop decisions are
        only recorded."""
        rows = []
        pos = {r: 0 for r in plan}
        active = [r for r in sorted(plan) if plan[r]]
        while active:
            batch = [(r, plan[r][pos[r]]) for r in active]
            if self.cfg.mode == "screen":
                self._run_groups([g for _, g in batch], [list(g.branch_ids) for _, g in batch])
            for r, g in batch:
                found = {v.key for b in g.branch_ids for v in self.results[b].violations}
                stop = should_stop(state, r, found)
                with self._lock:
                    self.events.append(("should_stop", r, g.anchor, stop, time.perf_counter()))
                rows.append(self._row(g.anchor, r, g.distance, g.to_nodes, g.branch_ids, found,
                                      stop, state.counters[r]))
                pos[r] += 1
            active = [r for r in active if not state.is_stopped(r) and pos[r] < len(plan[r])]
        if link_ids:
            if self.cfg.mode == "screen":
                self._run_groups([None], [link_ids])
            found = {v.key for b in link_ids for v in self.results[b].violations}
            state.cumulative |= found
            labels = tuple(self._label(b) for b in link_ids)
            rows.append(self._row("links", LINK_REGION, None, labels, link_ids, found, False, None))
        return rows

    @staticmethod
    def _row(anchor, region, distance, to_nodes, branch_ids, found, stop, counter) -> dict:
        return {"from_node": anchor, "region": region, "distance": distance,
                "to_nodes": list(to_nodes), "branch_ids": list(branch_ids),
                "violations": [key_str(k) for k in sorted(found, key=lambda k: (k[2], k[1], k[0]))],
                "stop": bool(stop), "no_new_counter": counter}

    def _timing(self, timings, wall, results) -> dict:
        out = {"wall_s": wall, "workers": self.cfg.workers, "transport": self.cfg.transport,
               "latency_mean_ms": self.cfg.latency_mean_ms}
        if timings is not None:
            out.update({"lane_times_s": timings.finish, "lane_busy_s": timings.busy,
                        "T_s": timings.makespan, "sweep_wall_s": timings.wall})
        compute = sum(s.compute_time for s in self.cluster.servers.values()) if self.cluster else 0.0
        busy = sum(timings.busy) if timings else 0.0
        out["phases_s"] = {"region_computation": compute,
                           "boundary_exchange": self.exchange_time[0],
                           "coordination": max(0.0, busy - self.exchange_time[0])}
        out["contingencies"] = {str(r.branch_id): {"lane": r.lane, "wall_s": r.wall_s} for r in results}
        return out

    def close(self):
        if self.pool is not None:
            self.pool.close()
        if self.cluster is not None:
            self.cluster.close()


def run_dca(config: DcaConfig) -> DcaReport:
    engine = DcaEngine(config)
    try:
        report = engine.run()
    finally:
        engine.close()
    if config.out_dir:
        write_report(report, config.out_dir)
    return report


# ------------------------------------------------------------------ oracle / bench

def run_oracle(config: DcaConfig, n1: bool = False) -> dict:
    """Centralized base case against the stitched distributed one, per bus."""
    system = load_system(config.case_path, config.partition_path)
    cent = solve_base(system)
    layout = BoundaryLayout.from_system(system)
    try:
        dist, F = solve_distributed(system, config.params)
    except RegionSolveError:
        dist = None
    if dist is None or not dist.converged:
        stored = {b.id: b.v_mag * np.exp(1j * b.v_ang) for b in system.case.buses}
        dist, F = solve_distributed(system, config.params,
                                    x0=boundary_vector_from_solution(system, layout, stored))
    stitched = F.stitched_voltages()
    region_of = system.spec.region_of_bus
    rows = []
    for bus_id, vc in zip(cent.bus_ids, cent.voltage):
        vd = stitched[bus_id]
        rows.append({"bus": bus_id, "region": region_of[bus_id],
                     "v_mag_distributed": abs(vd), "v_mag_centralized": abs(vc),
                     "v_ang_distributed": float(np.angle(vd)), "v_ang_centralized": float(np.angle(vc)),
                     "abs_diff_v_mag": abs(abs(vd) - abs(vc)),
                     "abs_diff_v_ang": abs(float(np.angle(vd)) - float(np.angle(vc)))})
    out = {"case": system.case.name, "rows": rows, "boundary_status": dist.status,
           "max_abs_diff_v_mag": max(r["abs_diff_v_mag"] for r in rows),
           "max_abs_diff_v_ang": max(r["abs_diff_v_ang"] for r in rows)}
    out["max_abs_diff"] = max(out["max_abs_diff_v_mag"], out["max_abs_diff_v_ang"])
    if n1:
        limits = load_limits(system.case, config.limits_path)
        outcomes = exhaustive_n1(system, limits, cent)
        out["n1_violations"] = sorted(violation_set(outcomes), key=lambda k: (k[2], k[1], k[0]))
        out["n1_status"] = {o.branch_id: o.status for o in outcomes}
    return out


def run_bench(config: DcaConfig, d_values=(1, 2, 4, 8), reps: int = 3) -> list[dict]:
    """Makespan per worker count, the maximum over ``reps`` repeated runs."""
    rows = []
    for d in d_values:
        ts = []
        for _ in range(reps):
            rep = run_dca(dataclasses.replace(config, workers=d, out_dir=None))
            if rep.aborted:
                raise RuntimeError(f"benchmark run with D={d} aborted: {rep.body['abort_reason']}")
            ts.append(rep.timing["T_s"])
        rows.append({"d": d, "T": max(ts), "runs": ts})
    return rows


# ------------------------------------------------------------------ output

def write_report(report: DcaReport, out_dir, oracle: dict | None = None,
                 bench: list[dict] | None = None) -> list[Path]:
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def table(name, header, rows):
        p = out / name
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(p)

    p = out / "report.json"
    p.write_text(report.to_json() + "\n")
    paths.append(p)
    table("screening.csv", ["from_node", "region", "distance", "to_nodes", "violations", "stop"],
          [[r["from_node"], r["region"], "" if r["distance"] is None else f"{r['distance']:.6g}",
            ";".join(map(str, r["to_nodes"])), ";".join(r["violations"]) or "None",
            "Stop" if r["stop"] else ""] for r in report.body.get("screening", [])])
    table("iterations.csv", ["contingency", "label", "region", "group_anchor", "status", "start",
                             "outer", "inner", "total", "evaluations"],
          [[c["id"], c["label"], c["region"], c["group_anchor"], c["status"], c["start"],
            c["outer_iterations"], c["inner_iterations"], c["total_iterations"],
            c["residual_evaluations"]] for c in report.body.get("contingencies", [])])
    table("traces.csv", ["contingency", "outer", "inner", "norm_inf"],
          [[r.branch_id, *t] for r in report.results for t in r.trace])
    if oracle is not None:
        write_oracle(oracle, out, paths)
    if bench is not None:
        table("bench.csv", ["d", "T"], [[b["d"], f"{b['T']:.6f}"] for b in bench])
    return paths


def write_oracle(oracle: dict, out_dir, paths=None) -> Path:
    import csv

    p = Path(out_dir) / "residuals.csv"
    p.parent.mkdir(parents=True, exist_ok=True)
    cols = ["bus", "region", "v_mag_distributed", "v_mag_centralized", "abs_diff_v_mag",
            "v_ang_distributed", "v_ang_centralized", "abs_diff_v_ang"]
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["max_abs_diff"])
        for r in oracle["rows"]:
            w.writerow([r[c] for c in cols] + [max(r["abs_diff_v_mag"], r["abs_diff_v_ang"])])
    if paths is not None:
        paths.append(p)
    return p


# ------------------------------------------------------------------ server side

def serve_region(case_path, partition_path, region: int, listen: str,
                 limits_path: str | None = None, once: bool = False,
                 on_ready: Callable[[str], None] | None = None) -> str:
    """Serve one region over TCP, one coordinator session at a time."""
    system = load_system(case_path, partition_path)
    system.region(region)
    limits = load_limits(system.case, limits_path)
    lhash = limits_hash(limits)
    listener = TcpListener(listen)
    log.info("region %d listening on %s", region, listener.address)
    if on_ready:
        on_ready(listener.address)
    state = "Idle"
    try:
        while True:
            conn = listener.accept()
            state = ComputationServer(system, region, conn, limits, lhash).serve()
            conn.close()
            log.info("region %d session ended: %s", region, state)
            if once:
                return state
    finally:
        listener.close()
