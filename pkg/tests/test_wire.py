import io
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpignite import wire
from mpignite.errors import ConnectionLost, MalformedPayload, ProtocolError
from mpignite.wire import (
    Envelope, FrameKind, Hello, JobSpec, RankEntry, RankMap, Result, Routing, read_frame,
    write_frame,
)


def test_empty_frame_is_ten_bytes():
    f = write_frame(FrameKind.SHUTDOWN)
    assert len(f) == 10
    assert f == struct.pack("<IBBI", 0x4D504947, 1, 8, 0)
    assert f[:4] == b"GIPM"  # "MPIG" little-endian


def test_two_frames_read_in_order():
    s = io.BytesIO(write_frame(FrameKind.HELLO, b"abc") + write_frame(FrameKind.JOB_DONE, b"x"))
    assert read_frame(s) == (FrameKind.HELLO, b"abc")
    assert read_frame(s) == (FrameKind.JOB_DONE, b"x")
    with pytest.raises(ConnectionLost):
        read_frame(s)


def test_truncated_body():
    f = write_frame(FrameKind.USER_MSG, b"0123456789")
    with pytest.raises(ConnectionLost):
        read_frame(io.BytesIO(f[:-3]))


def test_truncated_header():
    with pytest.raises(ConnectionLost):
        read_frame(io.BytesIO(write_frame(FrameKind.HELLO)[:6]))


def test_bad_magic():
    f = bytearray(write_frame(FrameKind.HELLO))
    f[0] ^= 0xFF
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(bytes(f)))


def test_bad_version():
    f = struct.pack("<IBBI", wire.MAGIC, 2, 0, 0)
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(f))


def test_unknown_kind():
    f = struct.pack("<IBBI", wire.MAGIC, 1, 255, 0)
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(f))


def test_frame_too_large(monkeypatch):
    monkeypatch.setattr(wire, "MAX_BODY", 4)
    with pytest.raises(wire.FrameTooLarge):
        write_frame(FrameKind.USER_MSG, b"12345")


class Dribble(io.RawIOBase):
    """Returns at most one byte per read, like a slow socket."""

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def read(self, n=-1):
        if self.pos >= len(self.data):
            return b""
        self.pos += 1
        return self.data[self.pos - 1:self.pos]


def test_short_reads_are_reassembled():
    f = write_frame(FrameKind.RESULT, b"payload")
    assert read_frame(Dribble(f)) == (FrameKind.RESULT, b"payload")


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(list(FrameKind)), st.binary(max_size=2048))
def test_frame_round_trip(kind, body):
    assert read_frame(io.BytesIO(write_frame(kind, body))) == (kind, body)


def test_envelope_layout():
    env = Envelope(0, 1, 2, -3, b"\x01\x2a\x00\x00\x00")
    body = env.encode()
    assert body[:20] == struct.pack("<QIIi", 0, 1, 2, -3)
    assert body[20:24] == struct.pack("<I", 5)
    assert Envelope.decode(body) == env


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.integers(-(2**31), 2**31 - 1), st.binary(max_size=64))
def test_envelope_round_trip(ctx, src, dst, tag, payload):
    env = Envelope(ctx, src, dst, tag, payload)
    assert Envelope.decode(env.encode()) == env


def _rank_map(n, workers=3):
    return RankMap(tuple(RankEntry(r, 1 + r % workers, "127.0.0.1", 5000 + r % workers)
                         for r in range(n)))


def test_job_spec_round_trip():
    rm = _rank_map(9)
    spec = JobSpec(7, "matvec2d", 9, (0, 3, 6), rm, Routing.MASTER_RELAY, b"\x01\x05\x00\x00\x00")
    assert JobSpec.decode(spec.encode()) == spec
    assert rm.ranks_on(1) == [0, 3, 6]
    assert rm.worker_of(4) == 2


def test_rank_map_needs_every_rank_once():
    with pytest.raises(ValueError):
        RankMap((RankEntry(0, 1, "h", 1), RankEntry(2, 1, "h", 1)))
    with pytest.raises(ValueError):
        RankMap((RankEntry(0, 1, "h", 1), RankEntry(0, 2, "h", 1)))


def test_small_bodies():
    assert Hello.decode(Hello(3, 9, "10.0.0.1", 7077).encode()) == Hello(3, 9, "10.0.0.1", 7077)
    assert Result.decode(Result(1, 2, 0, b"x").encode()) == Result(1, 2, 0, b"x")
    assert RankEntry.decode(RankEntry(5, 2, "::1", 1).encode()) == RankEntry(5, 2, "::1", 1)
    assert wire.decode_ctx_alloc_reply(wire.encode_ctx_alloc_reply(2**40, 3)) == (2**40, 3)
    assert wire.decode_addr_req(wire.encode_addr_req(17)) == 17
    assert wire.decode_job_done(wire.encode_job_done(4)) == 4


def test_body_with_trailing_garbage():
    with pytest.raises(MalformedPayload):
        Envelope.decode(Envelope(0, 0, 0, 0, b"").encode() + b"!")
    with pytest.raises(MalformedPayload):
        wire.decode_addr_req(b"\x01\x00")


def test_routing_parse():
    assert Routing.parse("relay") is Routing.MASTER_RELAY
    assert Routing.parse("P2P") is Routing.P2P
    with pytest.raises(ValueError):
        Routing.parse("carrier-pigeon")
