"""
Master and worker processes for cluster mode.

The master (which is also the driver) accepts worker connections, assigns
world ranks round-robin over the registered workers, ships a TASK_ASSIGN
with the full rank map to every worker, answers address lookups and context
id allocations, forwards user messages in MASTER_RELAY mode and collects one
RESULT per rank. A job ends with JOB_DONE on every worker connection, sent
either when the last result arrives or as soon as the first rank fails.

Workers run one thread per assigned rank and one reader per connection.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

from . import codec
from .comm import Communicator
from .errors import (
    ConnectionLost,
    ProtocolError,
    ReceiveAborted,
    TransportFailure,
)
from .mailbox import Mailbox
from .runtime import JobHandle, ParallelBody, ParallelJob, describe_failure, lookup, name_of, run_rank
from .transport import AddressDirectory, Connection, ContextAllocator, TcpTransport, serve_peer
from .wire import (
    RESULT_FAILED,
    RESULT_OK,
    Envelope,
    FrameCounter,
    FrameKind,
    Hello,
    JobSpec,
    RankEntry,
    RankMap,
    Result,
    Routing,
    decode_addr_req,
    decode_ctx_alloc_reply,
    decode_ctx_alloc_req,
    decode_job_done,
    encode_addr_req,
    encode_ctx_alloc_reply,
    encode_ctx_alloc_req,
    encode_job_done,
    write_frame,
)

log = logging.getLogger(__name__)

REQUEST_TIMEOUT = 30.0
_WILDCARD_HOSTS = {"", "0.0.0.0", "::"}
_ENVELOPE_DST = struct.Struct("<QII")


def parse_address(text: str, default_host: str = "127.0.0.1") -> Tuple[str, int]:
    """``host:port`` (or ``:port`` / ``port``) to a tuple."""
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = "", text
    host = host.strip("[]") or default_host
    try:
        port_num = int(port)
    except ValueError:
        raise ValueError(f"bad address {text!r}: port must be an integer") from None
    if not 0 <= port_num <= 65535:
        raise ValueError(f"bad address {text!r}: port out of range")
    return host, port_num


# -- master -----------------------------------------------------------------

@dataclass
class _WorkerInfo:
    worker_id: int
    conn: Connection
    host: str
    port: int


class Master:
    """Driver and coordinator of a cluster.

    ``counter`` tallies every frame the master sends and receives, across all
    worker connections.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 routing: Routing = Routing.P2P):
        self.routing = Routing(routing)
        self.counter = FrameCounter()
        self.directory = AddressDirectory()
        self.contexts = ContextAllocator()
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._lock = threading.Condition()
        self._workers: Dict[int, _WorkerInfo] = {}
        self._next_worker = 1
        self._next_job = 1
        self._last_done = 0
        self._job: Optional[JobHandle] = None
        self._job_workers: set = set()
        self._job_done_sent = False
        self._closed = False
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True,
                                               name="mpignite-master-accept")
        self._accept_thread.start()
        log.info("master listening on %s:%d", *self.address)

    def __enter__(self) -> "Master":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    @property
    def worker_ids(self) -> List[int]:
        with self._lock:
            return sorted(self._workers)

    def worker_address(self, worker_id: int) -> Tuple[str, int]:
        with self._lock:
            w = self._workers[worker_id]
            return w.host, w.port

    def wait_for_workers(self, count: int, timeout: Optional[float] = None) -> None:
        with self._lock:
            if not self._lock.wait_for(lambda: len(self._workers) >= count, timeout):
                raise TimeoutError(f"only {len(self._workers)} of {count} workers registered")

    # -- connections

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, peer = self._listener.accept()
            except OSError:
                return
            conn = Connection(sock, self.counter, name=f"worker@{peer[0]}:{peer[1]}")
            threading.Thread(target=self._serve_worker, args=(conn,), daemon=True,
                             name=f"mpignite-master-{peer[1]}").start()

    def _handshake(self, conn: Connection) -> _WorkerInfo:
        kind, body = conn.recv()
        if kind is not FrameKind.HELLO:
            raise ProtocolError(f"worker opened with {kind.name}, expected HELLO")
        hello = Hello.decode(body)
        host = hello.host
        if host in _WILDCARD_HOSTS:
            host = conn.sock.getpeername()[0]
        with self._lock:
            wid = self._next_worker
            self._next_worker += 1
            info = _WorkerInfo(wid, conn, host, hello.port)
            conn.send(FrameKind.HELLO, Hello(wid, self._last_done, host, hello.port).encode())
            self._workers[wid] = info
            self._lock.notify_all()
        conn.name = f"worker-{wid}"
        log.info("worker %d registered, peers reach it at %s:%d", wid, host, hello.port)
        return info

    def _serve_worker(self, conn: Connection) -> None:
        info = None
        try:
            info = self._handshake(conn)
            while True:
                kind, body = conn.recv()
                self._dispatch(info, kind, body)
        except ConnectionLost:
            pass
        except Exception:
            log.exception("connection %s failed", conn.name)
        finally:
            conn.close()
            if info is not None:
                self._worker_lost(info)

    def _dispatch(self, info: _WorkerInfo, kind: FrameKind, body: bytes) -> None:
        if kind is FrameKind.USER_MSG:
            self._relay(body)
        elif kind is FrameKind.RESULT:
            self._on_result(Result.decode(body))
        elif kind is FrameKind.ADDR_REQ:
            rank = decode_addr_req(body)
            entry = self.directory.lookup(rank) or RankEntry(rank, 0, "", 0)
            info.conn.send(FrameKind.ADDR_REPLY, entry.encode())
        elif kind is FrameKind.CTX_ALLOC_REQ:
            count = decode_ctx_alloc_req(body)
            first = self.contexts.allocate(count)
            info.conn.send(FrameKind.CTX_ALLOC_REPLY, encode_ctx_alloc_reply(first, count))
        else:
            raise ProtocolError(f"unexpected {kind.name} from worker {info.worker_id}")

    def _relay(self, body: bytes) -> None:
        _, _, dst = _ENVELOPE_DST.unpack_from(body)
        entry = self.directory.lookup(dst)
        with self._lock:
            target = self._workers.get(entry.worker_id) if entry else None
        if target is None:
            log.warning("relay: no worker for rank %d, message dropped", dst)
            return
        try:
            target.conn.send_frame(FrameKind.USER_MSG, write_frame(FrameKind.USER_MSG, body))
        except TransportFailure as e:
            log.warning("relay to worker %d failed: %s", target.worker_id, e)

    def _worker_lost(self, info: _WorkerInfo) -> None:
        with self._lock:
            self._workers.pop(info.worker_id, None)
            job = self._job
            involved = job is not None and info.worker_id in self._job_workers
        if self._closed:
            log.debug("worker %d disconnected", info.worker_id)
        else:
            log.warning("worker %d disconnected", info.worker_id)
        if involved and not self._closed:
            job.fail_remaining(f"worker {info.worker_id} disconnected")
            self._maybe_finish(job)

    # -- jobs

    def parallelize_func(self, fn: Union[str, ParallelBody]) -> ParallelJob:
        return ParallelJob(self, fn)

    def submit(self, fn: Union[str, ParallelBody], n: int, params: Any = None,
               routing: Optional[Routing] = None) -> JobHandle:
        if not isinstance(n, int) or n < 1:
            raise ValueError(f"process count must be >= 1, got {n!r}")
        name = name_of(fn)
        blob = codec.encode(params) if params is not None else b""
        routing = self.routing if routing is None else Routing(routing)
        with self._lock:
            if self._job is not None and not self._job.done():
                raise RuntimeError("a job is already running on this cluster")
            workers = [self._workers[w] for w in sorted(self._workers)]
            if not workers:
                raise RuntimeError("no workers registered")
            job_id = self._next_job
            self._next_job += 1
            entries = []
            for rank in range(n):
                w = workers[rank % len(workers)]
                entries.append(RankEntry(rank, w.worker_id, w.host, w.port))
            rank_map = RankMap(tuple(entries))
            self.directory.load(rank_map)
            handle = JobHandle(job_id, n)
            handle.on_first_failure(lambda: self._end_job(handle))
            self._job = handle
            self._job_workers = {w.worker_id for w in workers}
            self._job_done_sent = False
            for w in workers:
                spec = JobSpec(job_id, name, n, tuple(rank_map.ranks_on(w.worker_id)),
                               rank_map, routing, blob)
                w.conn.send(FrameKind.TASK_ASSIGN, spec.encode())
        log.info("job %d: %s on %d ranks over %d workers (%s)", job_id, name, n,
                 len(workers), routing.name)
        return handle

    def _on_result(self, res: Result) -> None:
        with self._lock:
            job = self._job
        if job is None or job.job_id != res.job_id:
            log.debug("stale result for job %d rank %d", res.job_id, res.rank)
            return
        job.report(res.rank, res.status == RESULT_OK, res.data)
        self._maybe_finish(job)

    def _maybe_finish(self, job: JobHandle) -> None:
        if job._reported == job.world_size and not job.done():
            self._end_job(job)
            job.finish()

    def _end_job(self, job: JobHandle) -> None:
        """Send JOB_DONE once per job to every worker that received it."""
        with self._lock:
            if self._job is not job or self._job_done_sent:
                return
            self._job_done_sent = True
            self._last_done = job.job_id
            targets = [self._workers[w] for w in self._job_workers if w in self._workers]
        for w in targets:
            try:
                w.conn.send(FrameKind.JOB_DONE, encode_job_done(job.job_id))
            except TransportFailure as e:
                log.warning("JOB_DONE to worker %d failed: %s", w.worker_id, e)

    def shutdown(self) -> None:
        """Tell every worker to exit and stop listening."""
        with self._lock:
            if self._closed:
                return
            self._closed = True
            workers = list(self._workers.values())
        for w in workers:
            try:
                w.conn.send(FrameKind.SHUTDOWN)
            except TransportFailure:
                pass
        try:
            self._listener.close()
        except OSError:
            pass


# -- worker -----------------------------------------------------------------

class _JobState:
    """Everything a worker holds for one job; created by whichever arrives
    first, the TASK_ASSIGN or a message for one of its ranks."""

    def __init__(self, job_id: int):
        self.job_id = job_id
        self.spec: Optional[JobSpec] = None
        self.transport: Optional[TcpTransport] = None
        self.threads: List[threading.Thread] = []
        self._mailboxes: Dict[int, Mailbox] = {}
        self._lock = threading.Lock()
        self._aborted: Optional[BaseException] = None

    def mailbox(self, rank: int) -> Mailbox:
        with self._lock:
            mb = self._mailboxes.get(rank)
            if mb is None:
                mb = self._mailboxes[rank] = Mailbox(rank)
                if self._aborted is not None:
                    mb.abort(self._aborted)
            return mb

    def enqueue(self, env: Envelope) -> None:
        if self.spec is not None and env.dst not in self.spec.assigned_ranks:
            log.warning("job %d: message for rank %d, not hosted here; dropped",
                        self.job_id, env.dst)
            return
        self.mailbox(env.dst).enqueue(env)

    def abort(self, error: BaseException) -> None:
        with self._lock:
            if self._aborted is None:
                self._aborted = error
            boxes = list(self._mailboxes.values())
        for mb in boxes:
            mb.abort(error)
        if self.transport is not None:
            self.transport.close()


class Worker:
    """One worker process: a master link plus a listener for peer workers."""

    def __init__(self, master: Tuple[str, int], listen: Tuple[str, int] = ("127.0.0.1", 0)):
        self.master_address = master
        self.counter = FrameCounter()
        self.worker_id = 0
        self.conn: Optional[Connection] = None
        self._listener = socket.create_server(listen)
        self.listen_address = self._listener.getsockname()[:2]
        self._lock = threading.Lock()
        self._jobs: Dict[int, _JobState] = {}
        self._last_done = 0
        self._req_lock = threading.Lock()
        self._addr_waiters: deque = deque()
        self._ctx_waiters: deque = deque()
        self._stopping = False

    def __repr__(self) -> str:
        return f"<Worker {self.worker_id} listening on {self.listen_address}>"

    def connect(self) -> None:
        host, port = self.master_address
        self.conn = Connection.connect(host, port, self.counter, name="master")
        lhost, lport = self.listen_address
        self.conn.send(FrameKind.HELLO, Hello(0, 0, lhost, lport).encode())
        kind, body = self.conn.recv()
        if kind is not FrameKind.HELLO:
            raise ProtocolError(f"master answered HELLO with {kind.name}")
        reply = Hello.decode(body)
        self.worker_id = reply.worker_id
        self._last_done = reply.job_id
        threading.Thread(target=self._accept_loop, daemon=True,
                         name=f"mpignite-w{self.worker_id}-accept").start()
        log.info("worker %d connected to master %s:%d", self.worker_id, host, port)

    def serve(self) -> int:
        """Process master frames until SHUTDOWN (0) or connection loss (1)."""
        if self.conn is None:
            self.connect()
        code = 1
        try:
            while True:
                kind, body = self.conn.recv()
                if kind is FrameKind.SHUTDOWN:
                    code = 0
                    break
                self._dispatch(kind, body)
        except ConnectionLost:
            if self._stopping:
                code = 0
            else:
                log.error("worker %d lost the master connection", self.worker_id)
        except Exception:
            log.exception("worker %d: master connection failed", self.worker_id)
        finally:
            self._stop()
        return code

    def _stop(self) -> None:
        self._stopping = True
        error = TransportFailure("master connection closed")
        with self._req_lock:
            waiters = list(self._addr_waiters) + list(self._ctx_waiters)
            self._addr_waiters.clear()
            self._ctx_waiters.clear()
        for fut in waiters:
            if not fut.done():
                fut.set_exception(error)
        with self._lock:
            jobs = list(self._jobs.values())
            self._jobs.clear()
        for job in jobs:
            job.abort(ReceiveAborted(f"worker {self.worker_id} shutting down"))
        deadline = time.monotonic() + 2.0
        for job in jobs:
            for t in job.threads:
                if t is not threading.current_thread():
                    t.join(max(0.0, deadline - time.monotonic()))
        try:
            self._listener.close()
        except OSError:
            pass
        if self.conn is not None:
            self.conn.close()

    def _job_state(self, job_id: int) -> Optional[_JobState]:
        with self._lock:
            if job_id <= self._last_done:
                return None
            state = self._jobs.get(job_id)
            if state is None:
                state = self._jobs[job_id] = _JobState(job_id)
            return state

    def _dispatch(self, kind: FrameKind, body: bytes) -> None:
        if kind is FrameKind.USER_MSG:
            # relayed traffic is ordered after JOB_DONE of the previous job
            state = self._job_state(self._last_done + 1)
            if state is not None:
                state.enqueue(Envelope.decode(body))
        elif kind is FrameKind.TASK_ASSIGN:
            self._start_job(JobSpec.decode(body))
        elif kind is FrameKind.ADDR_REPLY:
            self._answer(self._addr_waiters, RankEntry.decode(body))
        elif kind is FrameKind.CTX_ALLOC_REPLY:
            first, _count = decode_ctx_alloc_reply(body)
            self._answer(self._ctx_waiters, first)
        elif kind is FrameKind.JOB_DONE:
            self._finish_job(decode_job_done(body))
        else:
            raise ProtocolError(f"unexpected {kind.name} from master")

    def _answer(self, waiters: deque, value: Any) -> None:
        with self._req_lock:
            if not waiters:
                raise ProtocolError("reply without a pending request")
            fut = waiters.popleft()
        fut.set_result(value)

    def _request(self, waiters: deque, kind: FrameKind, body: bytes) -> Any:
        fut: Future = Future()
        with self._req_lock:
            if self._stopping:
                raise TransportFailure("worker is shutting down")
            waiters.append(fut)
            self.conn.send(kind, body)
        return fut.result(REQUEST_TIMEOUT)

    def request_address(self, rank: int) -> RankEntry:
        return self._request(self._addr_waiters, FrameKind.ADDR_REQ, encode_addr_req(rank))

    def request_contexts(self, count: int) -> int:
        return self._request(self._ctx_waiters, FrameKind.CTX_ALLOC_REQ,
                             encode_ctx_alloc_req(count))

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, peer = self._listener.accept()
            except OSError:
                return
            conn = Connection(sock, self.counter, name=f"peer@{peer[0]}:{peer[1]}")
            threading.Thread(target=serve_peer, args=(conn, self._peer_sink), daemon=True,
                             name=f"mpignite-w{self.worker_id}-peer").start()

    def _peer_sink(self, job_id: int):
        state = self._job_state(job_id)
        return state.enqueue if state is not None else None

    def _start_job(self, spec: JobSpec) -> None:
        state = self._job_state(spec.job_id)
        if state is None:
            log.warning("worker %d: TASK_ASSIGN for finished job %d", self.worker_id, spec.job_id)
            return
        state.spec = spec
        state.transport = TcpTransport(spec.job_id, spec.rank_map, spec.routing, self,
                                       state.mailbox, self.counter)
        try:
            fn = lookup(spec.function_name)
            params = codec.decode(spec.params) if spec.params else None
        except Exception as e:
            for rank in spec.assigned_ranks:
                self._send_result(Result(spec.job_id, rank, RESULT_FAILED,
                                         describe_failure(rank, e).encode()))
            return
        for rank in spec.assigned_ranks:
            t = threading.Thread(target=self._run_rank, args=(state, fn, rank, params),
                                 daemon=True, name=f"mpignite-job{spec.job_id}-rank{rank}")
            state.threads.append(t)
            t.start()

    def _run_rank(self, state: _JobState, fn, rank: int, params: Any) -> None:
        try:
            comm = Communicator.world(state.transport, rank, params)
            result = Result(state.job_id, rank, RESULT_OK, run_rank(fn, comm))
        except Exception as e:
            if not isinstance(e, ReceiveAborted):
                log.debug("job %d rank %d failed", state.job_id, rank, exc_info=True)
            result = Result(state.job_id, rank, RESULT_FAILED, describe_failure(rank, e).encode())
        self._send_result(result)

    def _send_result(self, result: Result) -> None:
        try:
            self.conn.send(FrameKind.RESULT, result.encode())
        except TransportFailure as e:
            level = logging.DEBUG if self._stopping else logging.ERROR
            log.log(level, "worker %d: cannot report rank %d: %s", self.worker_id, result.rank, e)

    def _finish_job(self, job_id: int) -> None:
        with self._lock:
            self._last_done = max(self._last_done, job_id)
            state = self._jobs.pop(job_id, None)
        if state is not None:
            state.abort(ReceiveAborted(f"job {job_id} ended"))

    def stop(self) -> None:
        """Close the master link from this side (serve() then returns 0)."""
        self._stopping = True
        if self.conn is not None:
            self.conn.close()


def run_worker(master: Tuple[str, int], listen: Tuple[str, int] = ("127.0.0.1", 0)) -> int:
    """Connect to ``master`` and serve until told to shut down; returns an exit code."""
    worker = Worker(master, listen)
    try:
        worker.connect()
    except (TransportFailure, ConnectionLost, ProtocolError) as e:
        log.error("cannot join master %s:%d: %s", master[0], master[1], e)
        return 1
    return worker.serve()


class LocalCluster:
    """A master plus ``n_workers`` in-process workers talking over loopback TCP."""

    def __init__(self, n_workers: int = 3, routing: Routing = Routing.P2P,
                 host: str = "127.0.0.1"):
        self.master = Master(host, 0, routing)
        self.workers: List[Worker] = []
        self._threads: List[threading.Thread] = []
        self.exit_codes: Dict[int, int] = {}
        for _ in range(n_workers):
            w = Worker(self.master.address, (host, 0))
            w.connect()
            self.workers.append(w)
            t = threading.Thread(target=self._serve, args=(w,), daemon=True,
                                 name=f"mpignite-worker-{w.worker_id}")
            t.start()
            self._threads.append(t)
        self.master.wait_for_workers(n_workers, timeout=10)

    def _serve(self, w: Worker) -> None:
        self.exit_codes[w.worker_id] = w.serve()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def routing(self) -> Routing:
        return self.master.routing

    @routing.setter
    def routing(self, value: Routing) -> None:
        self.master.routing = Routing(value)

    def parallelize_func(self, fn) -> ParallelJob:
        return self.master.parallelize_func(fn)

    def submit(self, fn, n: int, params: Any = None, routing: Optional[Routing] = None):
        return self.master.submit(fn, n, params, routing)

    def close(self, timeout: float = 10) -> None:
        self.master.shutdown()
        for t in self._threads:
            t.join(timeout)
