"""Reliable in-order frame transports: in-process queues and TCP.

Both carry encoded frames, so a frame log captured on either is byte
comparable. The in-process pair can delay deliveries by a seeded random
latency while keeping order.
"""
from __future__ import annotations

import collections
import socket
import threading
import time
from typing import Callable

import numpy as np

from .protocol import HEADER_SIZE, Frame, decode_frame, decode_header, encode_frame


class ConnectionLost(ConnectionError):
    pass


Tap = Callable[[str, bytes], None]


class Connection:
    """One end of a bidirectional frame channel."""

    name = "connection"

    def send(self, frame: Frame) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> Frame:
        """Next frame; raises ``TimeoutError`` or :class:`ConnectionLost`."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class LatencyModel:
    """Seeded exponential delivery delays (seconds)."""

    def __init__(self, mean_s: float = 0.0, seed: int = 0):
        self.mean_s = mean_s
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def draw(self) -> float:
        if self.mean_s <= 0:
            return 0.0
        with self._lock:
            return float(self._rng.exponential(self.mean_s))


class _Mailbox:
    def __init__(self):
        self.items = collections.deque()
        self.cond = threading.Condition()
        self.closed = False
        self.last_due = 0.0


class InProcessConnection(Connection):
    def __init__(self, inbox: _Mailbox, outbox: _Mailbox, latency: LatencyModel,
                 name: str, tap: Tap | None = None):
        self._in, self._out = inbox, outbox
        self.latency = latency
        self.name = name
        self.tap = tap

    def send(self, frame: Frame) -> None:
        data = encode_frame(frame)
        if self.tap:
            self.tap(self.name, data)
        box = self._out
        with box.cond:
            if box.closed:
                raise ConnectionLost(f"{self.name}: peer closed")
            # deliveries never overtake each other
            due = max(time.perf_counter() + self.latency.draw(), box.last_due)
            box.last_due = due
            box.items.append((due, data))
            box.cond.notify_all()

    def recv(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.perf_counter() + timeout
        box = self._in
        with box.cond:
            while True:
                if box.items:
                    due, data = box.items[0]
                    wait = due - time.perf_counter()
                    if wait <= 0:
                        box.items.popleft()
                        return decode_frame(data)[0]
                elif box.closed:
                    raise ConnectionLost(f"{self.name}: closed")
                else:
                    wait = None
                if deadline is not None:
                    left = deadline - time.perf_counter()
                    if left <= 0:
                        raise TimeoutError(f"{self.name}: receive timed out")
                    wait = left if wait is None else min(wait, left)
                box.cond.wait(wait)

    def close(self) -> None:
        for box in (self._in, self._out):
            with box.cond:
                box.closed = True
                box.cond.notify_all()


def in_process_pair(latency: LatencyModel | None = None, name: str = "link",
                    tap: Tap | None = None) -> tuple[InProcessConnection, InProcessConnection]:
    """Two connected ends ``(coordinator side, server side)``."""
    latency = latency or LatencyModel()
    a, b = _Mailbox(), _Mailbox()
    return (InProcessConnection(a, b, latency, f"{name}:c", tap),
            InProcessConnection(b, a, latency, f"{name}:s", tap))


class TcpConnection(Connection):
    def __init__(self, sock: socket.socket, name: str = "tcp", tap: Tap | None = None):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.name = name
        self.tap = tap
        self._send_lock = threading.Lock()
        self._buf = bytearray()

    def send(self, frame: Frame) -> None:
        data = encode_frame(frame)
        if self.tap:
            self.tap(self.name, data)
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionLost(f"{self.name}: {exc}") from exc

    def _fill(self, n: int, deadline: float | None):
        while len(self._buf) < n:
            if deadline is not None:
                left = deadline - time.perf_counter()
                if left <= 0:
                    raise TimeoutError(f"{self.name}: receive timed out")
                self.sock.settimeout(left)
            else:
                self.sock.settimeout(None)
            try:
                chunk = self.sock.recv(max(65536, n - len(self._buf)))
            except socket.timeout:
                raise TimeoutError(f"{self.name}: receive timed out") from None
            except OSError as exc:
                raise ConnectionLost(f"{self.name}: {exc}") from exc
            if not chunk:
                raise ConnectionLost(f"{self.name}: peer closed the connection")
            self._buf += chunk

    def recv(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.perf_counter() + timeout
        self._fill(HEADER_SIZE, deadline)
        n = decode_header(bytes(self._buf[:HEADER_SIZE]))[-1]
        self._fill(HEADER_SIZE + n, deadline)
        frame, used = decode_frame(bytes(self._buf))
        del self._buf[:used]
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


def tcp_connect(addr: str, timeout: float = 10.0, tap: Tap | None = None,
                name: str | None = None) -> TcpConnection:
    host, port = parse_address(addr)
    deadline = time.perf_counter() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.perf_counter()))
            return TcpConnection(sock, name or f"tcp:{addr}", tap)
        except OSError as exc:
            if time.perf_counter() >= deadline:
                raise ConnectionLost(f"cannot reach {addr}: {exc}") from exc
            time.sleep(0.05)


class TcpListener:
    def __init__(self, addr: str = "127.0.0.1:0"):
        host, port = parse_address(addr)
        self.sock = socket.create_server((host, port))
        self.address = "%s:%d" % self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None, tap: Tap | None = None) -> TcpConnection:
        self.sock.settimeout(timeout)
        try:
            conn, peer = self.sock.accept()
        except socket.timeout:
            raise TimeoutError("no connection accepted") from None
        return TcpConnection(conn, f"tcp:{self.address}", tap)

    def close(self) -> None:
        self.sock.close()
