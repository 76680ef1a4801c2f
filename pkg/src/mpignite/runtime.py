"""
Parallel functions, job handles and local-mode execution.

A parallel function takes exactly one :class:`~mpignite.comm.Communicator`
and returns a codec-encodable value (or None). ``execute(n)`` runs ``n``
ranked instances and returns their results indexed by rank, only after all
of them have finished.

Cluster mode cannot ship code, so functions that should run on workers are
registered by name (see :func:`register`) in a module both the driver and
the workers import.
"""

from __future__ import annotations

import logging
import threading
import traceback
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Union

from . import codec
from .comm import Communicator
from .errors import JobFailed, ReceiveAborted, RegistryError
from .transport import ContextAllocator, LocalTransport
from .wire import Routing

log = logging.getLogger(__name__)

ParallelBody = Callable[[Communicator], Any]

_registry: Dict[str, ParallelBody] = {}
_registry_lock = threading.Lock()


def register(name: Union[str, ParallelBody, None] = None):
    """Register a parallel function under ``name`` (default: its ``__name__``).

    Usable as ``@register``, ``@register("ring")`` or ``register("ring")(fn)``.
    Registering a different function under a taken name is an error.
    """

    def deco(fn: ParallelBody) -> ParallelBody:
        key = name if isinstance(name, str) else fn.__name__
        with _registry_lock:
            existing = _registry.get(key)
            if existing is not None and existing is not fn:
                raise RegistryError(f"parallel function {key!r} is already registered")
            _registry[key] = fn
        fn.mpignite_name = key
        return fn

    if callable(name):
        return deco(name)
    return deco


def lookup(name: str) -> ParallelBody:
    with _registry_lock:
        fn = _registry.get(name)
    if fn is None:
        raise RegistryError(f"no parallel function registered as {name!r}")
    return fn


def registered_names() -> List[str]:
    with _registry_lock:
        return sorted(_registry)


def name_of(fn: Union[str, ParallelBody]) -> str:
    """Registry name of ``fn``; raises RegistryError if it was never registered."""
    if isinstance(fn, str):
        lookup(fn)
        return fn
    key = getattr(fn, "mpignite_name", None)
    if key is None or lookup(key) is not fn:
        raise RegistryError(f"{getattr(fn, '__name__', fn)!r} is not a registered parallel "
                            f"function")
    return key


def run_rank(fn: ParallelBody, comm: Communicator) -> bytes:
    """Run one rank and return its result as payload bytes."""
    return codec.encode(fn(comm))


def describe_failure(rank: int, exc: BaseException) -> str:
    tb = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__, limit=8))
    return f"rank {rank}: {type(exc).__name__}: {exc}\n{tb}"


class JobHandle:
    """Result slots for one submitted job.

    ``result()`` is the implicit barrier: it returns only once every rank has
    reported (or raises JobFailed once the job is known to have failed and
    every surviving rank has stopped).
    """

    RUNNING, COMPLETED, FAILED = "running", "completed", "failed"

    def __init__(self, job_id: int, world_size: int):
        self.job_id = job_id
        self.world_size = world_size
        self.payloads: List[Optional[bytes]] = [None] * world_size
        self.errors: Dict[int, str] = {}
        self.origin: Optional[int] = None
        self.status = self.RUNNING
        self._reported = 0
        self._cond = threading.Condition()
        self._finished = False
        self._on_first_failure: List[Callable[[], None]] = []

    def __repr__(self) -> str:
        return f"<JobHandle {self.job_id} {self.status} {self._reported}/{self.world_size}>"

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def report(self, rank: int, ok: bool, data: Union[bytes, str]) -> bool:
        """Record one rank's outcome; returns True when all ranks are in."""
        trigger = []
        with self._cond:
            if self._finished or not 0 <= rank < self.world_size:
                return False
            if self.payloads[rank] is not None or rank in self.errors:
                log.warning("job %d: duplicate result for rank %d", self.job_id, rank)
                return False
            if ok:
                self.payloads[rank] = bytes(data)
            else:
                if not self.errors:
                    self.origin = rank
                    trigger, self._on_first_failure = self._on_first_failure, []
                self.errors[rank] = data if isinstance(data, str) else bytes(data).decode(
                    "utf-8", "replace")
            self._reported += 1
            done = self._reported == self.world_size
        for fn in trigger:
            fn()
        return done

    def on_first_failure(self, fn: Callable[[], None]) -> None:
        self._on_first_failure.append(fn)

    def fail_remaining(self, reason: str) -> None:
        """Mark every rank that has not reported as failed with ``reason``."""
        with self._cond:
            if self._finished:
                return
            missing = [r for r in range(self.world_size)
                       if self.payloads[r] is None and r not in self.errors]
        for r in missing:
            self.report(r, False, reason)

    def finish(self) -> None:
        with self._cond:
            self._finished = True
            self.status = self.FAILED if self.errors else self.COMPLETED
            self._cond.notify_all()

    def done(self) -> bool:
        return self._finished

    def wait(self, timeout: Optional[float] = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._finished, timeout)

    def result_payloads(self, timeout: Optional[float] = None) -> List[bytes]:
        if not self.wait(timeout):
            raise TimeoutError(f"job {self.job_id} still running after {timeout}s")
        if self.errors:
            raise JobFailed(self.job_id, self.origin, self.errors)
        return list(self.payloads)

    def result(self, timeout: Optional[float] = None) -> List[Any]:
        return [codec.decode(p) for p in self.result_payloads(timeout)]


@dataclass
class ParallelJob:
    """A parallel function bound to a context; nothing runs until execute."""

    context: Any
    function: Union[str, ParallelBody]

    def submit(self, n: int, params: Any = None) -> JobHandle:
        return self.context.submit(self.function, n, params)

    def execute(self, n: int, params: Any = None, timeout: Optional[float] = None) -> List[Any]:
        return self.submit(n, params).result(timeout)


class LocalContext:
    """Runs every rank as a thread of the calling process."""

    def __init__(self, routing: Routing = Routing.P2P):
        self.routing = Routing(routing)
        self.contexts = ContextAllocator()
        self._next_job = 1
        self._lock = threading.Lock()
        self.last_transport: Optional[LocalTransport] = None

    def parallelize_func(self, fn: Union[str, ParallelBody]) -> ParallelJob:
        if isinstance(fn, str):
            lookup(fn)
        elif not callable(fn):
            raise TypeError("parallelize_func needs a callable or a registered name")
        return ParallelJob(self, fn)

    def submit(self, fn: Union[str, ParallelBody], n: int, params: Any = None) -> JobHandle:
        if not isinstance(n, int) or n < 1:
            raise ValueError(f"process count must be >= 1, got {n!r}")
        body = lookup(fn) if isinstance(fn, str) else fn
        if params is not None:
            params = codec.decode(codec.encode(params))
        with self._lock:
            job_id = self._next_job
            self._next_job += 1
        transport = LocalTransport(n, self.routing, self.contexts)
        self.last_transport = transport
        handle = JobHandle(job_id, n)
        handle.on_first_failure(lambda: transport.abort(
            ReceiveAborted(f"job {job_id} aborted after rank {handle.origin} failed")))

        remaining = [n]
        remaining_lock = threading.Lock()

        def run(rank: int) -> None:
            try:
                comm = Communicator.world(transport, rank, params)
                payload = run_rank(body, comm)
            except Exception as e:
                if not isinstance(e, ReceiveAborted):
                    log.debug("job %d rank %d failed", job_id, rank, exc_info=True)
                handle.report(rank, False, describe_failure(rank, e))
            else:
                handle.report(rank, True, payload)
            with remaining_lock:
                remaining[0] -= 1
                last = remaining[0] == 0
            if last:
                transport.close()
                handle.finish()

        for rank in range(n):
            threading.Thread(target=run, args=(rank,), daemon=True,
                             name=f"mpignite-job{job_id}-rank{rank}").start()
        return handle


_default_context: Optional[LocalContext] = None


def parallelize_func(fn: Union[str, ParallelBody], context: Any = None) -> ParallelJob:
    """Bind ``fn`` to ``context`` (a LocalContext by default) for later execution."""
    global _default_context
    if context is None:
        if _default_context is None:
            _default_context = LocalContext()
        context = _default_context
    return context.parallelize_func(fn)
