"""
The communicator handed to every rank of a parallel function.

Point-to-point traffic is stamped with the communicator's context id and
translated from local to world ranks before it reaches the transport.
Collectives are built from the same send/receive primitives on reserved
negative tags, so they can never match user traffic.

Split protocol (collective over the parent communicator)::

    every member      -> parent rank 0 : [world rank, color, key]
    parent rank 0     groups by color, orders each group by
                      (key, parent rank), asks the transport for one fresh
                      context id per group
    parent rank 0     -> every member  : [] (opted out) or
                                         [context id, new rank, world ranks...]
"""

from __future__ import annotations

import logging
import os
from typing import Any, Callable, List, Optional, Sequence

from . import codec
from .codec import Kind
from .errors import (
    CollectiveAborted,
    InvalidRank,
    InvalidTag,
    ReceiveAborted,
    SplitProtocolError,
    UsageError,
)
from .mailbox import ReceiveTicket
from .transport import Transport
from .wire import Envelope

log = logging.getLogger(__name__)

WORLD_CONTEXT = 0
UNDEFINED = -1  # split color for "not a member of any new group"

TAG_SPLIT_UP = -1
TAG_SPLIT_DOWN = -2
TAG_BCAST = -3
TAG_REDUCE_UP = -4
TAG_REDUCE_DOWN = -5

SPLIT_TIMEOUT = float(os.environ.get("MPIGNITE_SPLIT_TIMEOUT", "30"))

I32_MIN, I32_MAX = codec.I32_MIN, codec.I32_MAX

_ABSENT = object()


def _decoder(kind: Optional[Kind]) -> Callable[[bytes], Any]:
    return lambda payload: codec.decode(payload, kind)


class Communicator:
    """A process group seen from one of its members.

    ``local_to_world[i]`` is the world rank of local rank ``i``. Each rank
    owns its own instance; instances of the same group share ``context_id``
    and the same ``local_to_world`` ordering.
    """

    def __init__(self, transport: Transport, context_id: int,
                 local_to_world: Sequence[int], rank: int, params: Any = None):
        if not 0 <= rank < len(local_to_world):
            raise InvalidRank(f"rank {rank} outside a group of {len(local_to_world)}")
        self.transport = transport
        self.context_id = context_id
        self.local_to_world = tuple(local_to_world)
        self._rank = rank
        self.params = params
        self.split_epoch = 0
        self.world_rank = self.local_to_world[rank]
        self._mailbox = transport.mailbox(self.world_rank)

    @classmethod
    def world(cls, transport: Transport, rank: int, params: Any = None) -> "Communicator":
        return cls(transport, WORLD_CONTEXT, range(transport.world_size), rank, params)

    def __repr__(self) -> str:
        return (f"<Communicator ctx={self.context_id} rank={self._rank}/{self.size} "
                f"world={self.world_rank}>")

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def size(self) -> int:
        return len(self.local_to_world)

    def get_rank(self) -> int:
        return self._rank

    def get_size(self) -> int:
        return len(self.local_to_world)

    # -- point to point -----------------------------------------------------

    def _check_peer(self, rank: int, what: str) -> int:
        if not isinstance(rank, int) or not 0 <= rank < self.size:
            raise InvalidRank(f"{what} rank {rank!r} outside a group of {self.size}")
        return self.local_to_world[rank]

    @staticmethod
    def _check_tag(tag: int) -> None:
        if not isinstance(tag, int) or not 0 <= tag <= I32_MAX:
            raise InvalidTag(f"tag must be a non-negative 32-bit int, got {tag!r}")

    def _post(self, dst: int, tag: int, payload: bytes) -> None:
        self.transport.deliver(Envelope(self.context_id, self.world_rank,
                                        self.local_to_world[dst], tag, payload))

    def _match(self, src: int, tag: int, kind: Optional[Kind] = None,
               timeout: Optional[float] = None) -> Any:
        return self._mailbox.receive(self.context_id, self.local_to_world[src], tag,
                                     _decoder(kind), timeout)

    def send(self, dst: int, tag: int, value: Any, kind: Optional[Kind] = None) -> None:
        """Send ``value`` to local rank ``dst``. Never waits for the receiver."""
        self._check_peer(dst, "destination")
        self._check_tag(tag)
        self._post(dst, tag, codec.encode(value, kind))

    def receive(self, src: int, tag: int, kind: Optional[Kind] = None) -> Any:
        """Block until the earliest message from ``src`` with ``tag`` arrives.

        With ``kind`` set, a payload of a different kind raises TypeMismatch.
        """
        self._check_peer(src, "source")
        self._check_tag(tag)
        return self._match(src, tag, kind)

    def receive_async(self, src: int, tag: int, kind: Optional[Kind] = None) -> ReceiveTicket:
        self._check_peer(src, "source")
        self._check_tag(tag)
        return self._mailbox.receive_async(self.context_id, self.local_to_world[src], tag,
                                           _decoder(kind))

    # -- split --------------------------------------------------------------

    def split(self, color: int, key: int) -> Optional["Communicator"]:
        """Partition this communicator by ``color``, ordering each part by ``key``.

        Every member must call it. Members passing ``UNDEFINED`` (-1) as
        color take part in the exchange but get None back. Equal keys keep
        parent rank order.
        """
        if not isinstance(color, int) or not (color == UNDEFINED or 0 <= color <= I32_MAX):
            raise UsageError(f"split color must be >= 0 or UNDEFINED, got {color!r}")
        if not isinstance(key, int) or not I32_MIN <= key <= I32_MAX:
            raise UsageError(f"split key must be a 32-bit int, got {key!r}")
        mine = [self.world_rank, color, key]
        try:
            if self._rank == 0:
                reply = self._split_root(mine)
            else:
                self._post(0, TAG_SPLIT_UP, codec.encode(mine, Kind.ARRAY_I64))
                reply = self._match(0, TAG_SPLIT_DOWN, Kind.ARRAY_I64)
        except ReceiveAborted as e:
            raise CollectiveAborted(f"split aborted: {e}") from e
        self.split_epoch += 1
        if not reply:
            return None
        ctx, new_rank, members = reply[0], reply[1], reply[2:]
        return Communicator(self.transport, ctx, members, new_rank, self.params)

    def _split_root(self, mine: List[int]) -> List[int]:
        requests = [mine]
        for src in range(1, self.size):
            try:
                req = self._match(src, TAG_SPLIT_UP, Kind.ARRAY_I64, timeout=SPLIT_TIMEOUT)
            except TimeoutError:
                raise SplitProtocolError(
                    f"split epoch {self.split_epoch}: rank {src} did not join within "
                    f"{SPLIT_TIMEOUT}s") from None
            if len(req) != 3 or req[0] != self.local_to_world[src]:
                raise SplitProtocolError(f"malformed split request from rank {src}: {req}")
            requests.append(req)

        groups = split_groups([(c, k) for _, c, k in requests])
        first = self.transport.allocate_contexts(len(groups)) if groups else 0
        replies: List[List[int]] = [[] for _ in range(self.size)]
        for i, (color, members) in enumerate(sorted(groups.items())):
            world = [self.local_to_world[p] for p in members]
            for new_rank, p in enumerate(members):
                replies[p] = [first + i, new_rank] + world
        for dst in range(1, self.size):
            self._post(dst, TAG_SPLIT_DOWN, codec.encode(replies[dst], Kind.ARRAY_I64))
        return replies[0]

    # -- collectives --------------------------------------------------------

    def broadcast(self, root: int, value: Any = _ABSENT, kind: Optional[Kind] = None) -> Any:
        """Return ``root``'s value on every member.

        Only the root passes ``value``; everybody else names the root only.
        """
        self._check_peer(root, "root")
        is_root = self._rank == root
        if is_root and value is _ABSENT:
            raise UsageError(f"broadcast root {root} must supply a value")
        if not is_root and value is not _ABSENT:
            raise UsageError(f"rank {self._rank} is not the broadcast root and must not "
                             f"supply a value")
        if is_root:
            payload = codec.encode(value, kind)
            for dst in range(self.size):
                if dst != root:
                    self._post(dst, TAG_BCAST, payload)
            return codec.decode(payload, kind)
        try:
            return self._match(root, TAG_BCAST, kind)
        except ReceiveAborted as e:
            raise CollectiveAborted(f"broadcast aborted: {e}") from e

    def all_reduce(self, value: Any, f: Callable[[Any, Any], Any],
                   kind: Optional[Kind] = None) -> Any:
        """Combine every member's value with ``f`` and return it on all members.

        The result is ``f(...f(f(v0, v1), v2)..., v_{n-1})`` in local rank
        order, so non-commutative ``f`` gives the same answer everywhere.
        """
        own = codec.encode(value, kind)
        if self.size == 1:
            return codec.decode(own, kind)
        try:
            if self._rank != 0:
                self._post(0, TAG_REDUCE_UP, own)
                return self._match(0, TAG_REDUCE_DOWN, kind)
            acc = codec.decode(own, kind)
            for src in range(1, self.size):
                acc = f(acc, self._match(src, TAG_REDUCE_UP, kind))
        except ReceiveAborted as e:
            raise CollectiveAborted(f"all_reduce aborted: {e}") from e
        payload = codec.encode(acc, kind)
        for dst in range(1, self.size):
            self._post(dst, TAG_REDUCE_DOWN, payload)
        return codec.decode(payload, kind)


def split_groups(requests: Sequence[tuple]) -> dict:
    """Group ``(color, key)`` requests, indexed by parent rank.

    Returns ``{color: [parent ranks ordered by (key, parent rank)]}``,
    omitting UNDEFINED.
    """
    groups: dict = {}
    for parent, (color, key) in enumerate(requests):
        if color != UNDEFINED:
            groups.setdefault(color, []).append((key, parent))
    return {c: [p for _, p in sorted(m)] for c, m in groups.items()}
