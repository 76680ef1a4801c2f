"""
Framing and frame bodies for everything that crosses a process boundary.

A frame is a fixed 10-byte header followed by the body::

    magic  u32  0x4D504947 ("MPIG")
    version u8  1
    kind    u8  FrameKind
    length u32  body length in bytes
    body        kind-specific

All integers are little-endian. Strings are a u32 byte length followed by
UTF-8; byte blobs are a u32 length followed by the bytes. PROTOCOL.md has
the per-kind body tables.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import BinaryIO, List, Tuple

from .errors import ConnectionLost, FrameTooLarge, MalformedPayload, ProtocolError

MAGIC = 0x4D504947
VERSION = 1
MAX_BODY = 0xFFFFFFFF

_HEADER = struct.Struct("<IBBI")
HEADER_SIZE = _HEADER.size


class FrameKind(IntEnum):
    HELLO = 0
    TASK_ASSIGN = 1
    RESULT = 2
    USER_MSG = 3
    ADDR_REQ = 4
    ADDR_REPLY = 5
    CTX_ALLOC_REQ = 6
    CTX_ALLOC_REPLY = 7
    SHUTDOWN = 8
    JOB_DONE = 9


class Routing(IntEnum):
    P2P = 0
    MASTER_RELAY = 1

    @classmethod
    def parse(cls, text: str) -> "Routing":
        key = text.strip().lower().replace("-", "_")
        aliases = {"p2p": cls.P2P, "peer": cls.P2P, "relay": cls.MASTER_RELAY,
                   "master_relay": cls.MASTER_RELAY, "master": cls.MASTER_RELAY}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown routing mode {text!r} (use p2p or relay)") from None


def write_frame(kind: FrameKind, body: bytes = b"") -> bytes:
    if len(body) > MAX_BODY:
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_BODY}")
    return _HEADER.pack(MAGIC, VERSION, FrameKind(kind), len(body)) + bytes(body)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise ConnectionLost(f"stream ended with {remaining} of {n} bytes unread")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def parse_header(header: bytes) -> Tuple[FrameKind, int]:
    magic, version, kind, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        kind = FrameKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown frame kind {kind}") from None
    return kind, length


def read_frame(stream: BinaryIO) -> Tuple[FrameKind, bytes]:
    """Read exactly one frame from a blocking binary stream.

    Raises ConnectionLost on a short read (including clean EOF before the
    header) and ProtocolError on a malformed header.
    """
    kind, length = parse_header(_read_exact(stream, HEADER_SIZE))
    return kind, _read_exact(stream, length)


# -- body helpers -----------------------------------------------------------

class _Out:
    __slots__ = ("buf",)

    def __init__(self) -> None:
        self.buf = bytearray()

    def pack(self, fmt: str, *values) -> "_Out":
        self.buf += struct.pack("<" + fmt, *values)
        return self

    def blob(self, data: bytes) -> "_Out":
        self.buf += struct.pack("<I", len(data))
        self.buf += data
        return self

    def text(self, s: str) -> "_Out":
        return self.blob(s.encode("utf-8"))


class _In:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        end = self.pos + st.size
        if end > len(self.buf):
            raise MalformedPayload("truncated frame body")
        values = st.unpack_from(self.buf, self.pos)
        self.pos = end
        return values if len(values) > 1 else values[0]

    def blob(self) -> bytes:
        n = self.unpack("I")
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedPayload("truncated frame body")
        data = bytes(self.buf[self.pos:end])
        self.pos = end
        return data

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedPayload(f"invalid UTF-8 in frame body: {e}") from None

    def done(self):
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} trailing bytes in frame body")


# -- bodies -----------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    context_id: int
    src: int
    dst: int
    tag: int
    payload: bytes

    def encode(self) -> bytes:
        return bytes(_Out().pack("QIIi", self.context_id, self.src, self.dst, self.tag)
                     .blob(self.payload).buf)

    @classmethod
    def decode(cls, body: bytes) -> "Envelope":
        r = _In(body)
        ctx, src, dst, tag = r.unpack("QIIi")
        payload = r.blob()
        r.done()
        return cls(ctx, src, dst, tag, payload)


@dataclass(frozen=True)
class RankEntry:
    rank: int
    worker_id: int
    host: str
    port: int

    def _put(self, out: _Out) -> None:
        out.pack("IQ", self.rank, self.worker_id).text(self.host).pack("H", self.port)

    @classmethod
    def _get(cls, r: _In) -> "RankEntry":
        rank, worker_id = r.unpack("IQ")
        host = r.text()
        return cls(rank, worker_id, host, r.unpack("H"))

    def encode(self) -> bytes:
        out = _Out()
        self._put(out)
        return bytes(out.buf)

    @classmethod
    def decode(cls, body: bytes) -> "RankEntry":
        r = _In(body)
        entry = cls._get(r)
        r.done()
        return entry


@dataclass(frozen=True)
class RankMap:
    entries: Tuple[RankEntry, ...]

    def __post_init__(self):
        ranks = sorted(e.rank for e in self.entries)
        if ranks != list(range(len(ranks))):
            raise ValueError("rank map must hold exactly one entry per world rank")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.rank)))

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, rank: int) -> RankEntry:
        return self.entries[rank]

    def worker_of(self, rank: int) -> int:
        return self.entries[rank].worker_id

    def ranks_on(self, worker_id: int) -> List[int]:
        return [e.rank for e in self.entries if e.worker_id == worker_id]


@dataclass(frozen=True)
class JobSpec:
    job_id: int
    function_name: str
    world_size: int
    assigned_ranks: Tuple[int, ...]
    rank_map: RankMap
    routing: Routing
    params: bytes = b""

    def encode(self) -> bytes:
        out = _Out().pack("Q", self.job_id).text(self.function_name)
        out.pack("II", self.world_size, len(self.assigned_ranks))
        for r in self.assigned_ranks:
            out.pack("I", r)
        out.pack("I", len(self.rank_map))
        for e in self.rank_map.entries:
            e._put(out)
        out.pack("B", self.routing).blob(self.params)
        return bytes(out.buf)

    @classmethod
    def decode(cls, body: bytes) -> "JobSpec":
        r = _In(body)
        job_id = r.unpack("Q")
        name = r.text()
        world_size, n_assigned = r.unpack("II")
        assigned = tuple(r.unpack("I") for _ in range(n_assigned))
        n_entries = r.unpack("I")
        entries = tuple(RankEntry._get(r) for _ in range(n_entries))
        try:
            routing = Routing(r.unpack("B"))
        except ValueError as e:
            raise MalformedPayload(str(e)) from None
        params = r.blob()
        r.done()
        try:
            rank_map = RankMap(entries)
        except ValueError as e:
            raise MalformedPayload(str(e)) from None
        return cls(job_id, name, world_size, assigned, rank_map, routing, params)


@dataclass(frozen=True)
class Hello:
    """Handshake. Worker to master: ``worker_id`` 0 plus the peer listen
    address; master replies with the assigned id. Worker to worker: the
    sender's id and the job the connection belongs to."""

    worker_id: int
    job_id: int = 0
    host: str = ""
    port: int = 0

    def encode(self) -> bytes:
        return bytes(_Out().pack("QQ", self.worker_id, self.job_id).text(self.host)
                     .pack("H", self.port).buf)

    @classmethod
    def decode(cls, body: bytes) -> "Hello":
        r = _In(body)
        worker_id, job_id = r.unpack("QQ")
        host = r.text()
        port = r.unpack("H")
        r.done()
        return cls(worker_id, job_id, host, port)


RESULT_OK = 0
RESULT_FAILED = 1


@dataclass(frozen=True)
class Result:
    """Outcome of one rank. ``data`` is PayloadBytes when ``status`` is
    RESULT_OK and UTF-8 diagnostic text otherwise."""

    job_id: int
    rank: int
    status: int
    data: bytes

    @property
    def ok(self) -> bool:
        return self.status == RESULT_OK

    def encode(self) -> bytes:
        return bytes(_Out().pack("QIB", self.job_id, self.rank, self.status).blob(self.data).buf)

    @classmethod
    def decode(cls, body: bytes) -> "Result":
        r = _In(body)
        job_id, rank, status = r.unpack("QIB")
        data = r.blob()
        r.done()
        return cls(job_id, rank, status, data)


def _single(fmt: str):
    def enc(*values) -> bytes:
        return struct.pack("<" + fmt, *values)

    def dec(body: bytes):
        r = _In(body)
        v = r.unpack(fmt)
        r.done()
        return v

    return enc, dec


encode_addr_req, decode_addr_req = _single("I")
encode_ctx_alloc_req, decode_ctx_alloc_req = _single("I")
encode_ctx_alloc_reply, decode_ctx_alloc_reply = _single("QI")
encode_job_done, decode_job_done = _single("Q")


class FrameCounter:
    """Per-kind tallies of frames sent and received on one endpoint."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.sent = {k: 0 for k in FrameKind}
        self.received = {k: 0 for k in FrameKind}

    def on_sent(self, kind: FrameKind) -> None:
        with self._lock:
            self.sent[kind] += 1

    def on_received(self, kind: FrameKind) -> None:
        with self._lock:
            self.received[kind] += 1

    def reset(self) -> None:
        with self._lock:
            for k in FrameKind:
                self.sent[k] = 0
                self.received[k] = 0
