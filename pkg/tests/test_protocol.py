import json
import struct

import pytest
from hypothesis import given, settings, strategies as st

from dca.protocol import (
    HEADER_SIZE, MAX_PAYLOAD, BadMagic, Frame, MessageType, OversizePayload, TruncatedFrame,
    UnknownType, UnknownVersion, decode_frame, decode_header, dumps_payload, encode_frame,
    finite_list, make_frame,
)

u32 = st.integers(0, 2 ** 32 - 1)
json_value = st.recursive(
    st.none() | st.booleans() | st.integers(-2 ** 53, 2 ** 53)
    | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=5) | st.dictionaries(st.text(max_size=8), inner, max_size=5),
    max_leaves=20,
)
frames = st.builds(
    Frame, st.sampled_from(list(MessageType)), u32, u32, u32,
    st.binary(max_size=256), st.integers(0, 2 ** 16 - 1),
)


def test_init_frame_bytes():
    data = encode_frame(make_frame(MessageType.INIT, 0, 0, 0))
    assert len(data) == HEADER_SIZE == 24
    assert data[:6] == bytes([0x44, 0x43, 0x41, 0x31, 0x01, 0x01])


def test_header_is_little_endian():
    data = encode_frame(Frame(MessageType.STOP, 0x01020304, 7, 9, b"{}", flags=0x0102))
    assert data[6:8] == b"\x02\x01"
    assert data[8:12] == b"\x04\x03\x02\x01"
    assert struct.unpack_from("<I", data, 20)[0] == 2


@settings(max_examples=300)
@given(frames)
def test_round_trip(frame):
    data = encode_frame(frame)
    decoded, used = decode_frame(data)
    assert decoded == frame
    assert used == len(data) == HEADER_SIZE + len(frame.payload)


@given(frames, frames)
def test_decoding_consumes_exactly_one_frame(a, b):
    stream = encode_frame(a) + encode_frame(b)
    first, used = decode_frame(stream)
    second, used2 = decode_frame(stream[used:])
    assert (first, second) == (a, b)
    assert used + used2 == len(stream)


@given(json_value)
def test_payload_json_round_trip(body):
    frame = make_frame(MessageType.BOUNDARY_DATA, 1, 2, 3, {"v": body})
    assert decode_frame(encode_frame(frame))[0].json() == {"v": body}


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_bit_exact(x):
    assert json.loads(dumps_payload([x]))[0] == x


def test_payload_is_canonical():
    assert dumps_payload({"b": 1, "a": [1.5, 2]}) == b'{"a":[1.5,2],"b":1}'
    with pytest.raises(ValueError):
        dumps_payload({"x": float("nan")})


def test_bad_magic():
    data = bytearray(encode_frame(make_frame(MessageType.INIT, 0, 0, 0)))
    data[:4] = bytes.fromhex("deadbeef")
    with pytest.raises(BadMagic):
        decode_frame(bytes(data))


def test_unknown_version():
    data = bytearray(encode_frame(make_frame(MessageType.INIT, 0, 0, 0)))
    data[4] = 2
    with pytest.raises(UnknownVersion):
        decode_frame(bytes(data))


@pytest.mark.parametrize("code", [0x00, 0x0A, 0xFF])
def test_unknown_type_rejected(code):
    data = bytearray(encode_frame(make_frame(MessageType.INIT, 0, 0, 0)))
    data[5] = code
    with pytest.raises(UnknownType):
        decode_frame(bytes(data))


def test_truncated():
    data = encode_frame(make_frame(MessageType.DONE, 1, 1, 1, {"slot": 1}))
    with pytest.raises(TruncatedFrame):
        decode_frame(data[:10])
    with pytest.raises(TruncatedFrame):
        decode_frame(data[:-1])


def test_oversize():
    head = struct.pack("<4sBBHIIII", b"DCA1", 1, 1, 0, 0, 0, 0, MAX_PAYLOAD + 1)
    with pytest.raises(OversizePayload):
        decode_header(head)
    with pytest.raises(OversizePayload):
        encode_frame(Frame(MessageType.INIT, payload=b" " * (MAX_PAYLOAD + 1)))


def test_finite_list():
    assert finite_list([1, 2.5]) == [1.0, 2.5]
    with pytest.raises(ValueError):
        finite_list([1.0, float("inf")])
