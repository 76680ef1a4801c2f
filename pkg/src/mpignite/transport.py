"""
Envelope delivery between ranks.

Two implementations share the :class:`Transport` surface used by
communicators:

* :class:`LocalTransport` keeps every rank in one process. P2P delivery is a
  direct mailbox enqueue; MASTER_RELAY pushes every envelope through a single
  relay thread, the in-process stand-in for the master hop.
* :class:`TcpTransport` is the worker side of a cluster job. Ranks hosted on
  the same worker are enqueued directly. Other ranks are reached either
  through the master connection (MASTER_RELAY) or over a peer connection
  that is opened on first use after an ADDR_REQ to the master and cached for
  the rest of the job (P2P).
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Callable, Dict, Iterable, Optional, Tuple

from .errors import ConnectionLost, ProtocolError, RoutingError, TransportFailure
from .mailbox import Mailbox
from .wire import (
    Envelope,
    FrameCounter,
    FrameKind,
    Hello,
    RankEntry,
    RankMap,
    Routing,
    read_frame,
    write_frame,
)

log = logging.getLogger(__name__)

CONNECT_RETRIES = 5
CONNECT_BACKOFF = 0.05


class Connection:
    """A framed TCP connection: one reader at a time, writes serialized."""

    def __init__(self, sock: socket.socket, counter: Optional[FrameCounter] = None,
                 name: str = ""):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.name = name or repr(sock.getpeername())
        self.counter = counter if counter is not None else FrameCounter()
        self._rfile = sock.makefile("rb")
        self._wlock = threading.Lock()
        self.closed = False

    def __repr__(self) -> str:
        return f"<Connection {self.name}>"

    @classmethod
    def connect(cls, host: str, port: int, counter: Optional[FrameCounter] = None,
                retries: int = CONNECT_RETRIES, name: str = "") -> "Connection":
        last: Optional[OSError] = None
        for attempt in range(retries):
            try:
                sock = socket.create_connection((host, port), timeout=10)
                sock.settimeout(None)
                return cls(sock, counter, name or f"{host}:{port}")
            except OSError as e:
                last = e
                time.sleep(CONNECT_BACKOFF * (2**attempt))
        raise TransportFailure(f"cannot connect to {host}:{port}: {last}")

    def send(self, kind: FrameKind, body: bytes = b"") -> None:
        self.send_frame(kind, write_frame(kind, body))

    def send_frame(self, kind: FrameKind, frame: bytes) -> None:
        try:
            with self._wlock:
                self.sock.sendall(frame)
        except OSError as e:
            raise TransportFailure(f"send to {self.name} failed: {e}") from e
        self.counter.on_sent(kind)

    def recv(self) -> Tuple[FrameKind, bytes]:
        try:
            kind, body = read_frame(self._rfile)
        except (OSError, ValueError) as e:
            # ValueError: makefile read after close
            raise ConnectionLost(f"{self.name}: {e}") from e
        self.counter.on_received(kind)
        return kind, body

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class ContextAllocator:
    """Monotonic source of communicator context ids. 0 is the world."""

    def __init__(self, first: int = 1):
        self._next = first
        self._lock = threading.Lock()

    def allocate(self, count: int) -> int:
        if count < 1:
            raise ValueError("context allocation count must be positive")
        with self._lock:
            first = self._next
            self._next += count
        return first


class AddressDirectory:
    """World rank -> (worker id, address) for the job the master is running."""

    def __init__(self) -> None:
        self._entries: Dict[int, RankEntry] = {}
        self._lock = threading.Lock()

    def load(self, rank_map: RankMap) -> None:
        with self._lock:
            self._entries = {e.rank: e for e in rank_map.entries}

    def clear(self) -> None:
        with self._lock:
            self._entries = {}

    def lookup(self, rank: int) -> Optional[RankEntry]:
        with self._lock:
            return self._entries.get(rank)


class Transport:
    """What a communicator needs from the layer below it."""

    world_size: int
    counter: FrameCounter

    def deliver(self, env: Envelope) -> None:
        raise NotImplementedError

    def mailbox(self, rank: int) -> Mailbox:
        raise NotImplementedError

    def allocate_contexts(self, count: int) -> int:
        raise NotImplementedError

    def abort(self, error: Optional[BaseException] = None) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _check_dst(self, env: Envelope) -> None:
        if not 0 <= env.dst < self.world_size:
            raise RoutingError(f"no rank {env.dst} in a world of {self.world_size}")


class LocalTransport(Transport):
    def __init__(self, n: int, routing: Routing = Routing.P2P,
                 contexts: Optional[ContextAllocator] = None):
        if n < 1:
            raise ValueError("a local transport needs at least one rank")
        self.world_size = n
        self.routing = Routing(routing)
        self.counter = FrameCounter()
        self._mailboxes = [Mailbox(r) for r in range(n)]
        self._contexts = contexts or ContextAllocator()
        self._relay: Optional[queue.SimpleQueue] = None
        self._relay_thread: Optional[threading.Thread] = None
        if self.routing is Routing.MASTER_RELAY:
            self._relay = queue.SimpleQueue()
            self._relay_thread = threading.Thread(target=self._run_relay, daemon=True,
                                                  name="mpignite-local-relay")
            self._relay_thread.start()

    def deliver(self, env: Envelope) -> None:
        self._check_dst(env)
        if self._relay is not None:
            self.counter.on_sent(FrameKind.USER_MSG)
            self._relay.put(env)
        else:
            self._mailboxes[env.dst].enqueue(env)

    def _run_relay(self) -> None:
        while True:
            env = self._relay.get()
            if env is None:
                return
            self.counter.on_received(FrameKind.USER_MSG)
            self._mailboxes[env.dst].enqueue(env)

    def mailbox(self, rank: int) -> Mailbox:
        return self._mailboxes[rank]

    def allocate_contexts(self, count: int) -> int:
        return self._contexts.allocate(count)

    def abort(self, error: Optional[BaseException] = None) -> None:
        for mb in self._mailboxes:
            mb.abort(error)

    def close(self) -> None:
        if self._relay is not None:
            self._relay.put(None)
            self._relay_thread.join()
            self._relay = None


class TcpTransport(Transport):
    """Worker-side transport for one cluster job.

    ``link`` is the worker's master link; it must provide ``worker_id``,
    ``conn`` (the master Connection), ``request_address(rank)`` and
    ``request_contexts(count)``. ``mailbox_for`` returns the local mailbox of
    a hosted rank.
    """

    def __init__(self, job_id: int, rank_map: RankMap, routing: Routing, link,
                 mailbox_for: Callable[[int], Mailbox], counter: FrameCounter):
        self.job_id = job_id
        self.world_size = len(rank_map)
        self.rank_map = rank_map
        self.routing = Routing(routing)
        self.link = link
        self.counter = counter
        self._mailbox_for = mailbox_for
        self._endpoints: Dict[int, Connection] = {}
        self._endpoint_locks: Dict[int, threading.Lock] = {}
        self._lock = threading.Lock()
        self._closed = False

    @property
    def worker_id(self) -> int:
        return self.link.worker_id

    def local_ranks(self) -> Iterable[int]:
        return self.rank_map.ranks_on(self.worker_id)

    def cached_workers(self) -> set:
        with self._lock:
            return set(self._endpoints)

    def deliver(self, env: Envelope) -> None:
        self._check_dst(env)
        target = self.rank_map.worker_of(env.dst)
        if target == self.worker_id:
            self._mailbox_for(env.dst).enqueue(env)
        elif self.routing is Routing.MASTER_RELAY:
            self.link.conn.send(FrameKind.USER_MSG, env.encode())
        else:
            self.resolve_endpoint(env.dst).send(FrameKind.USER_MSG, env.encode())

    def resolve_endpoint(self, dst: int) -> Connection:
        """Return the cached peer connection for the worker hosting ``dst``.

        The first call for a given worker performs one ADDR_REQ/ADDR_REPLY
        exchange with the master and connects; concurrent callers for the
        same worker wait for that one lookup.
        """
        if not 0 <= dst < self.world_size:
            raise RoutingError(f"no rank {dst} in a world of {self.world_size}")
        wid = self.rank_map.worker_of(dst)
        with self._lock:
            ep = self._endpoints.get(wid)
            if ep is not None:
                return ep
            if self._closed:
                raise TransportFailure(f"job {self.job_id} transport is closed")
            wlock = self._endpoint_locks.setdefault(wid, threading.Lock())
        with wlock:
            with self._lock:
                ep = self._endpoints.get(wid)
            if ep is not None:
                return ep
            entry = self.link.request_address(dst)
            if entry.worker_id == 0:
                raise RoutingError(f"master has no address for rank {dst}")
            if entry.worker_id != wid:
                raise RoutingError(
                    f"rank {dst}: master says worker {entry.worker_id}, rank map says {wid}")
            ep = Connection.connect(entry.host, entry.port, self.counter,
                                    name=f"worker-{wid}@{entry.host}:{entry.port}")
            ep.send(FrameKind.HELLO, Hello(self.worker_id, self.job_id).encode())
            with self._lock:
                if self._closed:
                    ep.close()
                    raise TransportFailure(f"job {self.job_id} transport is closed")
                self._endpoints[wid] = ep
            log.debug("worker %d: endpoint to worker %d at %s:%d", self.worker_id, wid,
                      entry.host, entry.port)
            return ep

    def mailbox(self, rank: int) -> Mailbox:
        return self._mailbox_for(rank)

    def allocate_contexts(self, count: int) -> int:
        return self.link.request_contexts(count)

    def abort(self, error: Optional[BaseException] = None) -> None:
        for r in self.local_ranks():
            self._mailbox_for(r).abort(error)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            endpoints, self._endpoints = list(self._endpoints.values()), {}
        for ep in endpoints:
            ep.close()


def serve_peer(conn: Connection, route: Callable[[int], Optional[Callable[[Envelope], None]]]) -> None:
    """Read one inbound peer connection until it closes.

    The first frame must be HELLO naming the job; ``route(job_id)`` returns
    the enqueue function for that job or None when the job is already over,
    in which case the connection's messages are dropped.
    """
    try:
        kind, body = conn.recv()
        if kind is not FrameKind.HELLO:
            raise ProtocolError(f"peer opened with {kind.name}, expected HELLO")
        hello = Hello.decode(body)
        sink = route(hello.job_id)
        while True:
            kind, body = conn.recv()
            if kind is not FrameKind.USER_MSG:
                raise ProtocolError(f"unexpected {kind.name} on a peer connection")
            if sink is not None:
                sink(Envelope.decode(body))
    except ConnectionLost:
        pass
    except Exception:
        log.exception("peer connection %s failed", conn.name)
    finally:
        conn.close()
