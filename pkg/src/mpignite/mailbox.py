"""
Receiver-side buffering and exact (context, source, tag) matching.

Messages that arrive before anyone asks for them are buffered per matching
key; receives posted before the message arrives wait in a pending queue per
key. Whichever side shows up second consumes the earliest entry of the other,
so neither collection ever holds both halves of a match.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Deque, Dict, Optional, Tuple

from .errors import ReceiveAborted
from .wire import Envelope

log = logging.getLogger(__name__)

Key = Tuple[int, int, int]

PENDING, COMPLETED, FAILED = "pending", "completed", "failed"

DEFAULT_HIGH_WATERMARK = 10_000

_callback_pool: Optional[ThreadPoolExecutor] = None
_callback_pool_lock = threading.Lock()


def _callbacks() -> ThreadPoolExecutor:
    global _callback_pool
    with _callback_pool_lock:
        if _callback_pool is None:
            _callback_pool = ThreadPoolExecutor(max_workers=4, thread_name_prefix="mpignite-cb")
        return _callback_pool


class ReceiveTicket:
    """Placeholder for the value of one asynchronous receive.

    A ticket completes exactly once. Its value can be awaited with
    :meth:`result` (or :func:`await_result`), or consumed by callbacks
    registered with :meth:`on_success` / :meth:`add_done_callback`, which run
    on a shared runtime callback pool rather than on the sender's or the
    receiver's thread.
    """

    __slots__ = ("key", "_decoder", "_cond", "_state", "_value", "_error", "_callbacks")

    def __init__(self, key: Key, decoder: Optional[Callable[[bytes], Any]] = None):
        self.key = key
        self._decoder = decoder
        self._cond = threading.Condition(threading.Lock())
        self._state = PENDING
        self._value: Any = None
        self._error: Optional[BaseException] = None
        self._callbacks: list = []

    def __repr__(self) -> str:
        return f"<ReceiveTicket ctx={self.key[0]} src={self.key[1]} tag={self.key[2]} {self._state}>"

    @property
    def state(self) -> str:
        return self._state

    def done(self) -> bool:
        return self._state != PENDING

    def _settle(self, state: str, value: Any = None, error: Optional[BaseException] = None) -> None:
        with self._cond:
            if self._state != PENDING:
                raise RuntimeError(f"{self!r} completed twice")
            self._state, self._value, self._error = state, value, error
            callbacks, self._callbacks = self._callbacks, []
            self._cond.notify_all()
        for fn in callbacks:
            self._schedule(fn)

    def _complete(self, payload: bytes) -> None:
        if self._decoder is None:
            self._settle(COMPLETED, payload)
            return
        try:
            value = self._decoder(payload)
        except Exception as e:
            self._settle(FAILED, error=e)
        else:
            self._settle(COMPLETED, value)

    def _fail(self, error: BaseException) -> None:
        self._settle(FAILED, error=error)

    def result(self, timeout: Optional[float] = None) -> Any:
        """Block until the ticket completes and return its value.

        Raises the failure (e.g. ReceiveAborted, TypeMismatch) if the ticket
        failed, and TimeoutError if ``timeout`` elapses first.
        """
        with self._cond:
            if not self._cond.wait_for(lambda: self._state != PENDING, timeout):
                raise TimeoutError(f"{self!r} not completed within {timeout}s")
        if self._error is not None:
            raise self._error
        return self._value

    def exception(self, timeout: Optional[float] = None) -> Optional[BaseException]:
        with self._cond:
            if not self._cond.wait_for(lambda: self._state != PENDING, timeout):
                raise TimeoutError(f"{self!r} not completed within {timeout}s")
        return self._error

    def add_done_callback(self, fn: Callable[["ReceiveTicket"], None]) -> None:
        with self._cond:
            if self._state == PENDING:
                self._callbacks.append(fn)
                return
        self._schedule(fn)

    def on_success(self, fn: Callable[[Any], None]) -> None:
        def run(ticket: ReceiveTicket) -> None:
            if ticket._error is None:
                fn(ticket._value)

        self.add_done_callback(run)

    def on_failure(self, fn: Callable[[BaseException], None]) -> None:
        def run(ticket: ReceiveTicket) -> None:
            if ticket._error is not None:
                fn(ticket._error)

        self.add_done_callback(run)

    def _schedule(self, fn: Callable) -> None:
        def guarded() -> None:
            try:
                fn(self)
            except Exception:
                log.exception("receive callback raised")

        try:
            _callbacks().submit(guarded)
        except RuntimeError:
            # pool shut down at interpreter exit
            guarded()


def await_result(ticket: ReceiveTicket, timeout: Optional[float] = None) -> Any:
    """Wait for ``ticket`` and return its value (the MPI_Wait analogue)."""
    return ticket.result(timeout)


class Mailbox:
    """Message buffer and posted-receive queue for one world rank.

    ``enqueue`` is called by transport threads; ``receive``/``receive_async``
    by the owning rank. Both sides run under one lock.
    """

    def __init__(self, owner: int, high_watermark: int = DEFAULT_HIGH_WATERMARK):
        self.owner = owner
        self.high_watermark = high_watermark
        self._lock = threading.Lock()
        self._buffered: Dict[Key, Deque[bytes]] = {}
        self._pending: Dict[Key, Deque[ReceiveTicket]] = {}
        self._n_buffered = 0
        self._warned = False
        self._aborted: Optional[BaseException] = None
        self.enqueued_total = 0

    def __repr__(self) -> str:
        return f"<Mailbox rank={self.owner} buffered={self._n_buffered}>"

    @property
    def buffered_count(self) -> int:
        return self._n_buffered

    @property
    def pending_count(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._pending.values())

    def enqueue(self, env: Envelope) -> None:
        if env.dst != self.owner:
            raise ValueError(f"envelope for rank {env.dst} enqueued at rank {self.owner}")
        key = (env.context_id, env.src, env.tag)
        with self._lock:
            self.enqueued_total += 1
            if self._aborted is not None:
                return
            waiting = self._pending.get(key)
            if waiting:
                ticket = waiting.popleft()
                if not waiting:
                    del self._pending[key]
            else:
                self._buffered.setdefault(key, deque()).append(env.payload)
                self._n_buffered += 1
                if self._n_buffered >= self.high_watermark and not self._warned:
                    self._warned = True
                    log.warning("rank %d mailbox holds %d unmatched messages",
                                self.owner, self._n_buffered)
                return
        ticket._complete(env.payload)

    def receive_async(self, context_id: int, src: int, tag: int,
                      decoder: Optional[Callable[[bytes], Any]] = None) -> ReceiveTicket:
        key = (context_id, src, tag)
        ticket = ReceiveTicket(key, decoder)
        with self._lock:
            if self._aborted is not None:
                error = self._aborted
                payload = None
            else:
                error = None
                queue = self._buffered.get(key)
                if queue:
                    payload = queue.popleft()
                    self._n_buffered -= 1
                    if not queue:
                        del self._buffered[key]
                else:
                    payload = None
                    self._pending.setdefault(key, deque()).append(ticket)
        if error is not None:
            ticket._fail(error)
        elif payload is not None:
            ticket._complete(payload)
        return ticket

    def receive(self, context_id: int, src: int, tag: int,
                decoder: Optional[Callable[[bytes], Any]] = None,
                timeout: Optional[float] = None) -> Any:
        ticket = self.receive_async(context_id, src, tag, decoder)
        try:
            return ticket.result(timeout)
        except TimeoutError:
            if self._withdraw(ticket):
                raise
            # matched between the timeout and the withdrawal
            return ticket.result()

    def _withdraw(self, ticket: ReceiveTicket) -> bool:
        with self._lock:
            queue = self._pending.get(ticket.key)
            if queue and ticket in queue:
                queue.remove(ticket)
                if not queue:
                    del self._pending[ticket.key]
                return True
        return False

    def abort(self, error: Optional[BaseException] = None) -> None:
        """Fail every pending receive and refuse new ones; drop the buffer."""
        if error is None:
            error = ReceiveAborted(f"rank {self.owner}: job aborted")
        with self._lock:
            if self._aborted is not None:
                return
            self._aborted = error
            tickets = [t for q in self._pending.values() for t in q]
            self._pending.clear()
            self._buffered.clear()
            self._n_buffered = 0
        for t in tickets:
            t._fail(error)
