"""Binary frame codec for coordinator/server messages.

A frame is a 24-byte little-endian header followed by a UTF-8 JSON payload::

    magic(4) version(1) msg_type(1) flags(2) session_id(4) slot_id(4) seq(4) payload_len(4)
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass

MAGIC = b"DCA1"
VERSION = 1
HEADER = struct.Struct("<4sBBHIIII")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024


class MessageType(enum.IntEnum):
    INIT = 0x01
    INIT_ACK = 0x02
    START_ROUND = 0x03
    BOUNDARY_DATA = 0x04
    DATA_ACK = 0x05
    VIOLATION_REPORT = 0x06
    STOP = 0x07
    DONE = 0x08
    ERROR = 0x09


class FrameError(ValueError):
    pass


class BadMagic(FrameError):
    pass


class UnknownVersion(FrameError):
    pass


class UnknownType(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class OversizePayload(FrameError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MessageType
    session_id: int = 0
    slot_id: int = 0
    seq: int = 0
    payload: bytes = b""
    flags: int = 0
    version: int = VERSION

    def json(self):
        return json.loads(self.payload) if self.payload else {}


def dumps_payload(obj) -> bytes:
    """Canonical JSON: sorted keys, compact, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def make_frame(msg_type, session_id: int, slot_id: int, seq: int, body=None, flags: int = 0) -> Frame:
    payload = b"" if body is None else dumps_payload(body)
    return Frame(MessageType(msg_type), session_id, slot_id, seq, payload, flags)


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    head = HEADER.pack(MAGIC, frame.version, int(frame.msg_type), frame.flags,
                       frame.session_id, frame.slot_id, frame.seq, len(frame.payload))
    return head + frame.payload


def decode_header(data: bytes):
    if len(data) < HEADER_SIZE:
        raise TruncatedFrame(f"need {HEADER_SIZE} header bytes, have {len(data)}")
    magic, version, mtype, flags, session, slot, seq, n = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic.hex()}")
    if version != VERSION:
        raise UnknownVersion(f"protocol version {version}")
    try:
        mtype = MessageType(mtype)
    except ValueError:
        raise UnknownType(f"message type 0x{mtype:02x}") from None
    if n > MAX_PAYLOAD:
        raise OversizePayload(f"declared payload of {n} bytes exceeds {MAX_PAYLOAD}")
    return mtype, flags, session, slot, seq, n


def decode_frame(data: bytes) -> tuple[Frame, int]:
    """Decode the first frame in ``data``; returns it with the bytes consumed."""
    mtype, flags, session, slot, seq, n = decode_header(data)
    end = HEADER_SIZE + n
    if len(data) < end:
        raise TruncatedFrame(f"payload needs {n} bytes, have {len(data) - HEADER_SIZE}")
    return Frame(mtype, session, slot, seq, bytes(data[HEADER_SIZE:end]), flags, VERSION), end


def finite_list(values) -> list[float]:
    out = [float(v) for v in values]
    if not all(math.isfinite(v) for v in out):
        raise ValueError("non-finite value in numeric payload")
    return out
