import threading
import time

import numpy as np
import pytest

from conftest import load
from dca.boundary import BoundaryLayout, solve_distributed
from dca.jfng import jfng_solve
from dca.protocol import MessageType as MT, decode_frame, make_frame
from dca.session import (
    ComputationServer, CoordinatorSession, DistributedResidual, DuplicateRegion,
    HandshakeTimeout, LayoutHashMismatch, PrivacyViolation, ProtocolError, RemoteError,
    SlotTimeout, _SeqCheck, check_boundary_payload,
)
from dca.transport import (
    ConnectionLost, LatencyModel, TcpListener, in_process_pair, parse_address,
    tcp_connect,
)


@pytest.fixture
def ieee14():
    return load("ieee14")[1]


def start_cluster(system, overrides=None, tap=None, latency=None, **kw):
    layout = BoundaryLayout.from_system(system)
    conns, servers, ends = {}, {}, {}
    for region in system.regions:
        r = region.region_index
        c, s = in_process_pair(latency, f"region{r}", tap)
        servers[r] = ComputationServer(system, r, s, **(overrides or {}).get(r, {})).start()
        conns[r], ends[r] = c, s
    kw.setdefault("handshake_timeout", 2.0)
    kw.setdefault("slot_timeout", 5.0)
    return CoordinatorSession(conns, layout, **kw), servers, ends


def fake_server(conn, answer):
    """Replies to every frame with ``answer(frame)`` (a list of frames)."""
    def loop():
        seq = {}
        try:
            while True:
                frame = conn.recv()
                for mt, body in answer(frame):
                    seq[frame.slot_id] = seq.get(frame.slot_id, 0) + 1
                    conn.send(make_frame(mt, frame.session_id, frame.slot_id, seq[frame.slot_id], body))
        except ConnectionLost:
            pass
    threading.Thread(target=loop, daemon=True).start()


# ------------------------------------------------------------- transport

def test_latency_mean():
    model = LatencyModel(0.0004, seed=11)
    draws = np.array([model.draw() for _ in range(10_000)])
    assert abs(draws.mean() - 0.0004) <= 0.1 * 0.0004
    assert LatencyModel(0.0).draw() == 0.0


def test_latency_seeded():
    a = [LatencyModel(0.001, 5).draw() for _ in range(3)]
    b = [LatencyModel(0.001, 5).draw() for _ in range(3)]
    assert a == b


def test_in_process_preserves_order_under_latency():
    c, s = in_process_pair(LatencyModel(0.0005, seed=2))
    for i in range(1, 301):
        c.send(make_frame(MT.BOUNDARY_DATA, 1, 3, i, {"i": i}))
    got = [s.recv(timeout=2.0).seq for _ in range(300)]
    assert got == list(range(1, 301))


def test_in_process_delivery_is_delayed():
    c, s = in_process_pair(LatencyModel(0.02, seed=0))
    t0 = time.perf_counter()
    for i in range(1, 21):
        c.send(make_frame(MT.DONE, 1, 1, i))
    for _ in range(20):
        s.recv(timeout=5.0)
    assert time.perf_counter() - t0 >= 0.01


def test_in_process_timeout_and_close():
    c, s = in_process_pair()
    with pytest.raises(TimeoutError):
        s.recv(timeout=0.05)
    c.close()
    with pytest.raises(ConnectionLost):
        s.recv(timeout=0.5)
    with pytest.raises(ConnectionLost):
        s.send(make_frame(MT.DONE, 1, 1, 1))


def test_tcp_values_bit_identical():
    rng = np.random.default_rng(7)
    values = list(rng.standard_normal(9) * 10.0 ** rng.integers(-8, 8, 9))
    listener = TcpListener("127.0.0.1:0")
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("conn", listener.accept(5.0)))
    t.start()
    client = tcp_connect(listener.address, 5.0)
    t.join()
    server = box["conn"]
    frame = make_frame(MT.BOUNDARY_DATA, 1, 4, 1, {"x": values})
    client.send(frame)
    got = server.recv(timeout=5.0)
    assert got == frame
    assert got.json()["x"] == values
    assert all(a.hex() == b.hex() for a, b in zip(got.json()["x"], values))
    client.close()
    with pytest.raises(ConnectionLost):
        server.recv(timeout=2.0)
    server.close()
    listener.close()


def test_tcp_frames_equal_in_process_frames():
    frames = [make_frame(MT.BOUNDARY_DATA, 1, 2, i, {"p": [0.1 * i, 1 / 3]}) for i in range(1, 6)]
    logs = {"inproc": [], "tcp": []}
    c, s = in_process_pair(tap=lambda name, data: logs["inproc"].append(data))
    for f in frames:
        c.send(f)
    listener = TcpListener("127.0.0.1:0")
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("conn", listener.accept(5.0)))
    t.start()
    client = tcp_connect(listener.address, 5.0, tap=lambda name, data: logs["tcp"].append(data))
    t.join()
    for f in frames:
        client.send(f)
    assert [box["conn"].recv(timeout=5.0) for _ in frames] == frames
    assert logs["inproc"] == logs["tcp"]
    client.close()
    box["conn"].close()
    listener.close()


def test_tcp_unreachable():
    listener = TcpListener("127.0.0.1:0")
    addr = listener.address
    listener.close()
    with pytest.raises(ConnectionLost):
        tcp_connect(addr, timeout=0.3)


def test_parse_address():
    assert parse_address("127.0.0.1:9000") == ("127.0.0.1", 9000)
    with pytest.raises(ValueError):
        parse_address("localhost")


# --------------------------------------------------------------- session

def test_seq_check():
    chk = _SeqCheck()
    assert [chk.next_out(3), chk.next_out(3), chk.next_out(4)] == [1, 2, 1]
    chk.accept(make_frame(MT.DONE, 1, 5, 1))
    with pytest.raises(ProtocolError):
        chk.accept(make_frame(MT.DONE, 1, 5, 3))


def test_handshake_and_remote_solve_match_local(ieee14):
    session, servers, _ = start_cluster(ieee14)
    acks = session.handshake()
    assert sorted(acks) == [1, 2]
    assert all(s.state == "Ready" for s in servers.values())
    session.open_slot(1, None, "base")
    F = DistributedResidual(session, 1, ieee14)
    remote = jfng_solve(F, session.layout.flat_vector())
    local, _ = solve_distributed(ieee14)
    # boundary voltages travel in polar form, so agreement is to rounding only
    assert remote.converged and local.converged
    assert np.max(np.abs(remote.solution - local.solution)) <= 1e-7
    assert session.violations(1) == []
    session.close_slot(1)
    session.shutdown()
    for s in servers.values():
        s.thread.join(2.0)
        assert s.state == "Stopped"


def test_layout_hash_mismatch_aborts(ieee14):
    session, servers, _ = start_cluster(ieee14, overrides={2: {"layout_hash": "bad"}})
    t0 = time.perf_counter()
    with pytest.raises(LayoutHashMismatch):
        session.handshake()
    assert time.perf_counter() - t0 < session.handshake_timeout
    assert session.aborted
    for s in servers.values():
        s.thread.join(2.0)
        assert s.state == "Aborted"


def test_silent_server_times_out(ieee14):
    layout = BoundaryLayout.from_system(ieee14)
    c1, s1 = in_process_pair()
    c2, _silent = in_process_pair()
    srv = ComputationServer(ieee14, 1, s1).start()
    session = CoordinatorSession({1: c1, 2: c2}, layout, handshake_timeout=0.3)
    t0 = time.perf_counter()
    with pytest.raises(HandshakeTimeout):
        session.handshake()
    assert time.perf_counter() - t0 < 2.0
    srv.thread.join(2.0)
    assert srv.state == "Aborted"


def test_duplicate_region(ieee14):
    layout = BoundaryLayout.from_system(ieee14)
    conns = {}
    for r in (1, 2):
        c, s = in_process_pair()
        fake_server(s, lambda f: [(MT.INIT_ACK, {"region": 1, "layout_hash": layout.hash()})]
                    if f.msg_type == MT.INIT else [])
        conns[r] = c
    session = CoordinatorSession(conns, layout, handshake_timeout=2.0)
    with pytest.raises(DuplicateRegion):
        session.handshake()


def test_abort_is_idempotent(ieee14):
    session, servers, _ = start_cluster(ieee14)
    session.handshake()
    session.abort("first")
    session.abort("second")
    for s in servers.values():
        s.thread.join(2.0)
        assert s.state == "Aborted"


def test_server_terminal_state_is_sticky(ieee14):
    c, s = in_process_pair()
    srv = ComputationServer(ieee14, 1, s)
    srv._control(make_frame(MT.STOP, 1, 0, 1))
    assert srv.state == "Stopped"
    srv._control(make_frame(MT.ERROR, 1, 0, 2, {"error": "x"}))
    assert srv.state == "Stopped"


def test_killed_server_raises_connection_lost(ieee14):
    session, servers, ends = start_cluster(ieee14, slot_timeout=10.0)
    session.handshake()
    session.open_slot(1, None, "base")
    ends[2].close()
    t0 = time.perf_counter()
    with pytest.raises(ConnectionLost):
        session.exchange(1, 1, session.layout.flat_vector())
    assert time.perf_counter() - t0 < 2.0
    session.abort("test")


def test_region_rejects_repeated_round(ieee14):
    session, _, _ = start_cluster(ieee14)
    session.handshake()
    session.open_slot(1, None, "base")
    x = session.layout.flat_vector()
    session.exchange(1, 1, x)
    with pytest.raises(RemoteError) as info:
        session.exchange(1, 1, x)
    assert info.value.payload["error"] == "RoundMismatch"
    session.abort("test")


def test_coordinator_rejects_wrong_round(ieee14):
    layout = BoundaryLayout.from_system(ieee14)

    def answer(frame):
        body = frame.json()
        if frame.msg_type == MT.INIT:
            return [(MT.INIT_ACK, {"region": body["region"], "layout_hash": layout.hash()})]
        if frame.msg_type == MT.START_ROUND:
            return [(MT.DATA_ACK, {})]
        if frame.msg_type == MT.BOUNDARY_DATA:
            n = len(body["bus_ids"])
            return [(MT.BOUNDARY_DATA, {"slot": body["slot"], "round": body["round"] + 5,
                                        "region": body["region"], "bus_ids": body["bus_ids"],
                                        "v_mag": [1.0] * n, "v_ang": [0.0] * n, "slack_p": 0.0,
                                        "slack_q": 0.0, "slack_p_set": 0.0})]
        return []
    conns = {}
    for r in (1, 2):
        c, s = in_process_pair()
        fake_server(s, answer)
        conns[r] = c
    session = CoordinatorSession(conns, layout, handshake_timeout=2.0, slot_timeout=2.0)
    session.handshake()
    session.open_slot(1, None, "base")
    with pytest.raises(ProtocolError):
        session.exchange(1, 1, layout.flat_vector())


def test_slot_timeout(ieee14):
    layout = BoundaryLayout.from_system(ieee14)

    def answer(frame):
        if frame.msg_type == MT.INIT:
            return [(MT.INIT_ACK, {"region": frame.json()["region"], "layout_hash": layout.hash()})]
        return []
    conns = {}
    for r in (1, 2):
        c, s = in_process_pair()
        fake_server(s, answer)
        conns[r] = c
    session = CoordinatorSession(conns, layout, handshake_timeout=2.0, slot_timeout=0.2)
    session.handshake()
    with pytest.raises(SlotTimeout):
        session.open_slot(1, None, "base")


def test_server_requires_handshake(ieee14):
    c, s = in_process_pair()
    ComputationServer(ieee14, 1, s).start()
    c.send(make_frame(MT.START_ROUND, 1, 1, 1, {"slot": 1, "outage": None, "kind": "base"}))
    reply = c.recv(timeout=2.0)
    assert reply.msg_type == MT.ERROR and reply.json()["error"] == "NotReady"
    c.close()


def test_islanding_outage_reported_by_region(ieee14):
    session, _, _ = start_cluster(ieee14)
    session.handshake()
    region2 = ieee14.region(2)
    with pytest.raises(RemoteError) as info:
        session.open_slot(5, region2.branches[0].id, "contingency")
    assert info.value.payload["error"] == "Islanding"
    session.abort("test")


# --------------------------------------------------------------- privacy

def outbound(layout, region=1):
    ids = list(layout.boundary[region])
    return {"slot": 1, "round": 1, "region": region, "bus_ids": ids,
            "p": [0.0] * len(ids), "q": [0.0] * len(ids), "theta": 0.0}


def test_privacy_accepts_boundary_payloads(ieee14):
    layout = BoundaryLayout.from_system(ieee14)
    assert check_boundary_payload(outbound(layout), layout) == "outbound"
    ids = list(layout.boundary[2])
    reply = {"slot": 1, "round": 1, "region": 2, "bus_ids": ids, "v_mag": [1.0] * len(ids),
             "v_ang": [0.0] * len(ids), "slack_p": 0.1, "slack_q": 0.0, "slack_p_set": 0.1}
    assert check_boundary_payload(reply, layout) == "reply"


def test_privacy_rejects_internal_data(ieee14):
    layout = BoundaryLayout.from_system(ieee14)
    internal = next(b for b in ieee14.region(1).bus_ids if b not in layout.boundary[1])
    body = outbound(layout)
    body["bus_ids"] = body["bus_ids"][:-1] + [internal]
    with pytest.raises(PrivacyViolation):
        check_boundary_payload(body, layout)
    body = outbound(layout)
    body["v_internal"] = [1.0]
    with pytest.raises(PrivacyViolation):
        check_boundary_payload(body, layout)
    body = outbound(layout)
    body["p"] = body["p"] + [0.0]
    with pytest.raises(PrivacyViolation):
        check_boundary_payload(body, layout)


def test_captured_boundary_frames_are_private(ieee14):
    frames = []
    session, _, _ = start_cluster(ieee14, tap=lambda name, data: frames.append(decode_frame(data)[0]))
    session.handshake()
    session.open_slot(1, None, "base")
    jfng_solve(DistributedResidual(session, 1, ieee14), session.layout.flat_vector())
    session.close_slot(1)
    session.shutdown()
    data = [f for f in frames if f.msg_type == MT.BOUNDARY_DATA]
    assert data
    kinds = {check_boundary_payload(f.json(), session.layout) for f in data}
    assert kinds == {"outbound", "reply"}
