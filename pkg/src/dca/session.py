"""Coordinator and computation-server sessions over a frame transport.

Slot 0 carries session control (INIT, INIT_ACK, session STOP/DONE, ERROR);
every other slot is one power-flow case (base case or one contingency) with
its own request/reply sequence::

    START_ROUND -> DATA_ACK
    BOUNDARY_DATA -> BOUNDARY_DATA, then DATA_ACK from the coordinator   (per round)
    VIOLATION_REPORT -> VIOLATION_REPORT
    STOP -> DONE
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from typing import Mapping

import numpy as np

from .boundary import BoundaryLayout, RegionSolveError, RegionWorker
from .grid import Islanding, PartitionedSystem, apply_outage, case_fingerprint
from .powerflow import (OperatingLimits, Violation, check_violations,
                        evaluate_link_injections)
from .protocol import Frame, MessageType as MT, finite_list, make_frame
from .transport import Connection, ConnectionLost

log = logging.getLogger("dca.session")

CONTROL_SLOT = 0


class SessionError(RuntimeError):
    pass


class HandshakeTimeout(SessionError):
    pass


class LayoutHashMismatch(SessionError):
    pass


class DuplicateRegion(SessionError):
    pass


class SlotTimeout(SessionError):
    pass


class ProtocolError(SessionError):
    pass


class RemoteError(SessionError):
    def __init__(self, region: int, payload: dict):
        super().__init__(f"region {region}: {payload.get('error', 'error')}: {payload.get('detail', '')}")
        self.region = region
        self.payload = payload


class PrivacyViolation(AssertionError):
    pass


# ----------------------------------------------------------------- privacy

OUTBOUND_KEYS = {"slot", "round", "region", "bus_ids", "p", "q", "theta"}
REPLY_KEYS = {"slot", "round", "region", "bus_ids", "v_mag", "v_ang", "slack_p", "slack_q",
              "slack_p_set"}


def check_boundary_payload(body: dict, layout: BoundaryLayout) -> str:
    """Assert that a BOUNDARY_DATA payload holds boundary quantities only.

    Returns ``"outbound"`` or ``"reply"``. Any extra key, any bus id outside
    the region's boundary set or any array of the wrong length fails.
    """
    keys = set(body)
    if keys == OUTBOUND_KEYS:
        kind, arrays, scalars = "outbound", ("p", "q"), ("theta",)
    elif keys == REPLY_KEYS:
        kind, arrays, scalars = "reply", ("v_mag", "v_ang"), ("slack_p", "slack_q", "slack_p_set")
    else:
        raise PrivacyViolation(f"unexpected BOUNDARY_DATA fields {sorted(keys)}")
    region = body["region"]
    if region not in layout.boundary:
        raise PrivacyViolation(f"unknown region {region!r}")
    if list(body["bus_ids"]) != list(layout.boundary[region]):
        raise PrivacyViolation(f"region {region} payload names buses {body['bus_ids']}, "
                               f"boundary is {list(layout.boundary[region])}")
    for key in arrays:
        if not isinstance(body[key], list) or len(body[key]) != len(body["bus_ids"]):
            raise PrivacyViolation(f"field {key} is not a boundary-sized array")
    for key in scalars:
        if not isinstance(body[key], float):
            raise PrivacyViolation(f"field {key} is not a scalar")
    return kind


# ------------------------------------------------------------ coordinator

class _SeqCheck:
    """Per-slot sequence numbers: outbound counters and inbound validation."""

    def __init__(self):
        self.out: dict[int, int] = {}
        self.inb: dict[int, int] = {}
        self.lock = threading.Lock()

    def next_out(self, slot: int) -> int:
        with self.lock:
            self.out[slot] = self.out.get(slot, 0) + 1
            return self.out[slot]

    def accept(self, frame: Frame) -> None:
        expected = self.inb.get(frame.slot_id, 0) + 1
        if frame.seq != expected:
            raise ProtocolError(f"slot {frame.slot_id}: seq {frame.seq}, expected {expected}")
        self.inb[frame.slot_id] = frame.seq


_LOST = object()


class RegionLink:
    """Coordinator end of one region connection, demultiplexed by slot."""

    def __init__(self, region: int, conn: Connection, session_id: int):
        self.region = region
        self.conn = conn
        self.session_id = session_id
        self.seq = _SeqCheck()
        self._queues: dict[int, queue.Queue] = {}
        self._lock = threading.Lock()
        self.failure: Exception | None = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"dca-link-{region}")
        self._reader.start()

    def _queue(self, slot: int) -> queue.Queue:
        with self._lock:
            q = self._queues.get(slot)
            if q is None:
                q = self._queues[slot] = queue.Queue()
                if self.failure is not None:
                    q.put(_LOST)
            return q

    def _read_loop(self):
        try:
            while True:
                frame = self.conn.recv()
                self.seq.accept(frame)
                self._queue(frame.slot_id).put(frame)
        except (ConnectionLost, ProtocolError, ValueError, OSError) as exc:
            with self._lock:
                self.failure = exc if isinstance(exc, (ConnectionLost, ProtocolError)) \
                    else ConnectionLost(str(exc))
                for q in self._queues.values():
                    q.put(_LOST)

    def send(self, msg_type: MT, slot: int, body=None) -> None:
        if self.failure is not None:
            raise ConnectionLost(f"region {self.region}: {self.failure}")
        self.conn.send(make_frame(msg_type, self.session_id, slot, self.seq.next_out(slot), body))

    def recv(self, slot: int, timeout: float) -> Frame:
        try:
            item = self._queue(slot).get(timeout=timeout)
        except queue.Empty:
            raise SlotTimeout(f"region {self.region} slot {slot}: no reply within {timeout:g} s") from None
        if item is _LOST:
            if isinstance(self.failure, ProtocolError):
                raise self.failure
            raise ConnectionLost(f"region {self.region}: {self.failure}")
        return item

    def drop(self, slot: int) -> None:
        with self._lock:
            self._queues.pop(slot, None)

    def close(self) -> None:
        self.conn.close()


class CoordinatorSession:
    def __init__(self, connections: Mapping[int, Connection], layout: BoundaryLayout,
                 session_id: int = 1, init_body: dict | None = None,
                 handshake_timeout: float = 10.0, slot_timeout: float = 30.0):
        self.layout = layout
        self.session_id = session_id
        self.links = {r: RegionLink(r, c, session_id) for r, c in sorted(connections.items())}
        self.init_body = dict(init_body or {})
        self.handshake_timeout = handshake_timeout
        self.slot_timeout = slot_timeout
        self.established = False
        self.aborted = False
        self.acks: dict[int, dict] = {}

    # -- session control
    def handshake(self) -> dict[int, dict]:
        body = dict(self.init_body, session_id=self.session_id, roster=sorted(self.links),
                    layout_hash=self.layout.hash())
        for r, link in self.links.items():
            link.send(MT.INIT, CONTROL_SLOT, dict(body, region=r))
        deadline = time.perf_counter() + self.handshake_timeout
        claimed: dict[int, int] = {}
        try:
            for r, link in self.links.items():
                left = max(0.0, deadline - time.perf_counter())
                try:
                    frame = link.recv(CONTROL_SLOT, left)
                except SlotTimeout:
                    raise HandshakeTimeout(f"region {r} did not acknowledge within "
                                           f"{self.handshake_timeout:g} s") from None
                if frame.msg_type == MT.ERROR:
                    raise RemoteError(r, frame.json())
                if frame.msg_type != MT.INIT_ACK:
                    raise ProtocolError(f"expected INIT_ACK from region {r}, got {frame.msg_type.name}")
                ack = frame.json()
                who = ack.get("region")
                if who in claimed:
                    raise DuplicateRegion(f"region {who} claimed by two servers")
                claimed[who] = r
                if who != r:
                    raise ProtocolError(f"server at region {r} slot answered as region {who}")
                if ack.get("layout_hash") != body["layout_hash"]:
                    raise LayoutHashMismatch(f"region {r} layout hash {ack.get('layout_hash')} "
                                             f"!= {body['layout_hash']}")
                for key in ("limits_hash", "case_fingerprint"):
                    if key in self.init_body and ack.get(key) != self.init_body[key]:
                        raise LayoutHashMismatch(f"region {r} {key} {ack.get(key)} differs")
                self.acks[r] = ack
        except (SessionError, ConnectionLost) as exc:
            self.abort(f"handshake failed: {exc}")
            raise
        self.established = True
        return self.acks

    def abort(self, reason: str) -> None:
        if self.aborted:
            return
        self.aborted = True
        for link in self.links.values():
            try:
                link.send(MT.ERROR, CONTROL_SLOT, {"error": "SessionAborted", "detail": reason})
            except Exception:
                pass
        time.sleep(0.01)
        for link in self.links.values():
            link.close()

    def shutdown(self) -> None:
        if self.aborted:
            return
        for link in self.links.values():
            try:
                link.send(MT.STOP, CONTROL_SLOT, {})
            except ConnectionLost:
                pass
        for link in self.links.values():
            try:
                link.recv(CONTROL_SLOT, self.handshake_timeout)
            except (SessionError, ConnectionLost):
                pass
            link.close()
        self.aborted = True

    def _require(self):
        if not self.established or self.aborted:
            raise SessionError("session is not established")

    def _collect(self, slot: int, expect: MT) -> dict[int, Frame]:
        replies, errors = {}, []
        for r, link in self.links.items():
            frame = link.recv(slot, self.slot_timeout)
            if frame.msg_type == MT.ERROR:
                errors.append((r, frame.json()))
            elif frame.msg_type != expect:
                raise ProtocolError(f"region {r} slot {slot}: expected {expect.name}, "
                                    f"got {frame.msg_type.name}")
            else:
                replies[r] = frame
        if errors:
            r, body = errors[0]
            if body.get("error") == "RegionSolveError":
                raise RegionSolveError(r, message=body.get("detail", ""))
            raise RemoteError(r, body)
        return replies

    # -- per-slot exchange
    def open_slot(self, slot: int, outage: int | None, kind: str) -> None:
        """Start (or restart from scratch) the case carried by ``slot``."""
        self._require()
        for link in self.links.values():
            link.send(MT.START_ROUND, slot, {"slot": slot, "outage": outage, "kind": kind})
        self._collect(slot, MT.DATA_ACK)

    def exchange(self, slot: int, round_no: int, x) -> dict[int, dict]:
        """One boundary round: slices out, boundary voltages and slack power back."""
        self._require()
        parts = self.layout.split(x)
        for r, link in self.links.items():
            p, q, theta = parts[r]
            body = {"slot": slot, "round": round_no, "region": r,
                    "bus_ids": list(self.layout.boundary[r]),
                    "p": finite_list(p), "q": finite_list(q), "theta": float(theta)}
            check_boundary_payload(body, self.layout)
            link.send(MT.BOUNDARY_DATA, slot, body)
        frames = self._collect(slot, MT.BOUNDARY_DATA)
        out = {}
        for r, frame in frames.items():
            body = frame.json()
            check_boundary_payload(body, self.layout)
            if body["round"] != round_no or body["region"] != r:
                self.links[r].send(MT.ERROR, slot, {"error": "RoundMismatch",
                                                    "detail": f"expected round {round_no}"})
                raise ProtocolError(f"region {r} answered round {body['round']} for {round_no}")
            out[r] = body
        for r, link in self.links.items():
            link.send(MT.DATA_ACK, slot, {"slot": slot, "round": round_no})
        return out

    def violations(self, slot: int) -> list[Violation]:
        self._require()
        for link in self.links.values():
            link.send(MT.VIOLATION_REPORT, slot, {"slot": slot})
        frames = self._collect(slot, MT.VIOLATION_REPORT)
        found = []
        for r in sorted(frames):
            found += [Violation.from_dict(v) for v in frames[r].json()["violations"]]
        return found

    def close_slot(self, slot: int) -> None:
        if self.aborted:
            return
        for link in self.links.values():
            link.send(MT.STOP, slot, {"slot": slot})
        self._collect(slot, MT.DONE)
        for link in self.links.values():
            link.drop(slot)


class DistributedResidual:
    """Boundary residual evaluated through the session for one slot."""

    def __init__(self, session: CoordinatorSession, slot: int, system: PartitionedSystem,
                 first_round: int = 1):
        self.session = session
        self.slot = slot
        self.system = system
        self.layout = session.layout
        self.round = first_round - 1
        self.evaluations = 0
        self.last_voltages: dict[int, np.ndarray] | None = None
        self.last_x: np.ndarray | None = None

    def __call__(self, x) -> np.ndarray:
        x = self.layout.check(x)
        self.round += 1
        self.evaluations += 1
        self.last_voltages = None
        try:
            replies = self.session.exchange(self.slot, self.round, x)
        except RegionSolveError as exc:
            exc.x = x.copy()
            raise
        voltages = {r: np.asarray(b["v_mag"]) * np.exp(1j * np.asarray(b["v_ang"]))
                    for r, b in replies.items()}
        link = evaluate_link_injections(self.system.link_partition, voltages, self.layout.boundary)
        slack_p = {r: b["slack_p"] for r, b in replies.items()}
        set_p = {r: b["slack_p_set"] for r, b in replies.items()}
        self.last_voltages = voltages
        self.last_x = x.copy()
        return self.layout.assemble(x, voltages, slack_p, set_p, link)

    def boundary_voltage_map(self) -> dict[int, complex]:
        if self.last_voltages is None:
            raise RuntimeError("no successful evaluation yet")
        out = {}
        for r, v in self.last_voltages.items():
            out.update(zip(self.layout.boundary[r], v))
        return out


# ------------------------------------------------------------------ server

class _SlotState:
    def __init__(self, worker: RegionWorker | None, kind: str, outage):
        self.worker = worker
        self.kind = kind
        self.outage = outage
        self.round = 0


class ComputationServer:
    """Region-side session: answers one coordinator over one connection."""

    def __init__(self, system: PartitionedSystem, region: int, conn: Connection,
                 limits: OperatingLimits | None = None, limits_hash: str | None = None,
                 layout_hash: str | None = None):
        self.system = system
        self.region_index = region
        self.region = system.region(region)
        self.conn = conn
        self.layout = BoundaryLayout.from_system(system)
        self.layout_hash = layout_hash or self.layout.hash()
        self.limits = limits or OperatingLimits.from_case(system.case)
        self.limits_hash = limits_hash
        self.fingerprint = case_fingerprint(system.case)
        self.seq = _SeqCheck()
        self._send_lock = threading.Lock()
        self.state = "Idle"
        self.session_id = 0
        self.reference_profile = None
        self.compute_time = 0.0
        self._slots: dict[int, queue.Queue] = {}
        self._threads: list[threading.Thread] = []
        self.thread: threading.Thread | None = None

    def start(self) -> "ComputationServer":
        self.thread = threading.Thread(target=self.serve, daemon=True,
                                       name=f"dca-server-{self.region_index}")
        self.thread.start()
        return self

    def _send(self, msg_type: MT, slot: int, body=None) -> None:
        with self._send_lock:
            frame = make_frame(msg_type, self.session_id, slot, self.seq.next_out(slot), body)
            self.conn.send(frame)

    def _error(self, slot: int, error: str, detail: str = "", **extra) -> None:
        self._send(MT.ERROR, slot, dict(extra, error=error, detail=detail, region=self.region_index))

    def _terminate(self, state: str) -> None:
        # idempotent: repeated STOP/ERROR leaves the first terminal state
        if self.state in ("Stopped", "Aborted"):
            return
        self.state = state
        for q in self._slots.values():
            q.put(None)

    def serve(self) -> str:
        try:
            while self.state not in ("Stopped", "Aborted"):
                frame = self.conn.recv()
                self.seq.accept(frame)
                if frame.slot_id == CONTROL_SLOT:
                    self._control(frame)
                elif self.state != "Ready":
                    self._error(frame.slot_id, "NotReady", "handshake has not completed")
                else:
                    self._dispatch(frame)
        except (ConnectionLost, ProtocolError, ValueError) as exc:
            log.info("region %d server closing: %s", self.region_index, exc)
            self._terminate("Aborted")
        for t in self._threads:
            t.join(timeout=1.0)
        return self.state

    def _control(self, frame: Frame) -> None:
        body = frame.json()
        if frame.msg_type == MT.INIT:
            self.session_id = frame.session_id
            if body.get("region") != self.region_index:
                self._error(CONTROL_SLOT, "WrongRegion", f"this server is region {self.region_index}")
                return
            reg = self.region
            stored = [reg.buses[reg.bus_ids.index(b)] for b in reg.boundary_bus_ids]
            self._send(MT.INIT_ACK, CONTROL_SLOT, {
                "region": self.region_index, "layout_hash": self.layout_hash,
                "case_fingerprint": self.fingerprint, "limits_hash": self.limits_hash,
                "boundary": {"bus_ids": list(reg.boundary_bus_ids),
                             "v_mag": [b.v_mag for b in stored],
                             "v_ang": [b.v_ang for b in stored]},
                "slack_angle": reg.slack.v_ang,
            })
            self.state = "Ready"
        elif frame.msg_type == MT.STOP:
            self._terminate("Stopped")
            self._send(MT.DONE, CONTROL_SLOT, {})
        elif frame.msg_type == MT.ERROR:
            self._terminate("Aborted")
        else:
            self._error(CONTROL_SLOT, "UnexpectedMessage", frame.msg_type.name)

    def _dispatch(self, frame: Frame) -> None:
        q = self._slots.get(frame.slot_id)
        if q is None:
            q = self._slots[frame.slot_id] = queue.Queue()
            t = threading.Thread(target=self._slot_loop, args=(frame.slot_id, q), daemon=True)
            self._threads = [th for th in self._threads if th.is_alive()] + [t]
            t.start()
        q.put(frame)

    def _slot_loop(self, slot: int, q: queue.Queue) -> None:
        state: _SlotState | None = None
        while True:
            frame = q.get()
            if frame is None:
                return
            try:
                state = self._handle(slot, frame, state)
            except ConnectionLost:
                return
            except Exception as exc:  # reported to the coordinator, slot stays usable
                log.exception("region %d slot %d", self.region_index, slot)
                self._error(slot, type(exc).__name__, str(exc))
            if frame.msg_type == MT.STOP:
                self._slots.pop(slot, None)
                return

    def _handle(self, slot: int, frame: Frame, state: _SlotState | None) -> _SlotState | None:
        body = frame.json()
        mt = frame.msg_type
        if mt == MT.START_ROUND:
            outage = body.get("outage")
            grid = self.region
            if outage is not None and any(br.id == outage for br in grid.branches):
                out = apply_outage(self.system, outage)
                if isinstance(out, Islanding):
                    self._error(slot, "Islanding", f"outage {outage} splits region {self.region_index}")
                    return None
                grid = out.region(self.region_index)
            state = _SlotState(RegionWorker(grid, self.reference_profile), body.get("kind", ""), outage)
            self._send(MT.DATA_ACK, slot, {"slot": slot})
            return state
        if state is None:
            raise ProtocolError(f"slot {slot} has not been started")
        if mt == MT.BOUNDARY_DATA:
            check_boundary_payload(body, self.layout)
            state.round += 1
            if body["round"] != state.round or body["region"] != self.region_index:
                self._error(slot, "RoundMismatch", f"expected round {state.round}, got {body['round']}")
                state.round = body["round"]
                return state
            t0 = time.perf_counter()
            sol = state.worker.solve(np.asarray(body["p"]), np.asarray(body["q"]), body["theta"])
            self.compute_time += time.perf_counter() - t0
            if not sol.converged:
                self._error(slot, "RegionSolveError", f"mismatch {sol.max_mismatch:.3g}",
                            round=state.round)
                return state
            reply = {"slot": slot, "round": state.round, "region": self.region_index,
                     "bus_ids": list(self.region.boundary_bus_ids),
                     "v_mag": finite_list(np.abs(sol.boundary_voltages)),
                     "v_ang": finite_list(np.angle(sol.boundary_voltages)),
                     "slack_p": float(sol.slack_p), "slack_q": float(sol.slack_q),
                     "slack_p_set": float(state.worker.slack_p_set)}
            check_boundary_payload(reply, self.layout)
            self._send(MT.BOUNDARY_DATA, slot, reply)
        elif mt == MT.DATA_ACK:
            if body.get("round") != state.round:
                raise ProtocolError(f"acknowledged round {body.get('round')}, last was {state.round}")
        elif mt == MT.VIOLATION_REPORT:
            last = state.worker.last
            if last is None or not last.converged:
                self._error(slot, "NoSolution", "no converged region solution in this slot")
                return state
            found = check_violations(last.voltage_map(), state.worker.region.branches, self.limits,
                                     self.region_index, contingency=state.outage)
            self._send(MT.VIOLATION_REPORT, slot, {"violations": [v.to_dict() for v in found]})
        elif mt == MT.STOP:
            if state.kind == "base" and state.worker.last is not None and state.worker.last.converged:
                self.reference_profile = state.worker.profile
            self._send(MT.DONE, slot, {"slot": slot})
        else:
            raise ProtocolError(f"unexpected {mt.name} in slot {slot}")
        return state


def link_violations(system: PartitionedSystem, voltage: Mapping[int, complex],
                    limits: OperatingLimits, contingency=None) -> list[Violation]:
    """Flow violations on in-service link branches, tagged region 0.

    Boundary-bus voltages are judged by their own regions, so only branch
    limits are applied here.
    """
    flow_only = OperatingLimits(limits.branch_p_max, {})
    return check_violations(voltage, system.link_partition.branches, flow_only, 0, contingency)
