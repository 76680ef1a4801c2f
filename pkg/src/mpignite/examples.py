"""
Bundled example programs, registered by name so workers can run them.

    matvec    3x3 matrix times a vector, one row per rank, no messaging
    ring      a token passed once around all ranks
    evenodd   nonblocking receive: ranks r < 5 ask rank r + 5 for r's parity
    matvec2d  the same product on a 3x3 process grid: row/column splits,
              diagonal vector placement, column broadcast, row all-reduce
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass
from typing import Any, Callable, List, Optional

from .codec import Kind
from .comm import Communicator
from .mailbox import await_result
from .runtime import register

log = logging.getLogger(__name__)

MAT = [
    [1, 2, 3],
    [4, 5, 6],
    [7, 8, 9],
]
VEC = [1, 2, 3]

# pause before answering, so the asking ranks really wait on their tickets
EVENODD_DELAY = float(os.environ.get("MPIGNITE_EVENODD_DELAY", "0.3"))


@register("matvec")
def matvec(world: Communicator) -> int:
    rank = world.rank
    if rank < len(MAT):
        return sum(a * b for a, b in zip(MAT[rank], VEC))
    return 0


@register("ring")
def ring(world: Communicator) -> int:
    # Each hop adds one to the token so the root can check it went all the
    # way round: with n ranks the root gets n - 1 back. The send is modular,
    # so n = 1 sends to itself.
    rank, size = world.rank, world.size
    if rank == 0:
        world.send((rank + 1) % size, 0, 0)
        token = world.receive(size - 1, 0, Kind.I32)
    else:
        token = world.receive(rank - 1, 0, Kind.I32)
        world.send((rank + 1) % size, 0, token + 1)
    return token


@register("evenodd")
def evenodd(world: Communicator) -> bool:
    rank = world.rank
    if rank < 5:
        world.send(rank + 5, 0, rank)
        ticket = world.receive_async(rank + 5, 0, Kind.BOOL)
        log.info("rank %d: waiting", rank)
        seen = threading.Event()
        ticket.on_success(lambda even: (log.info("%d is even: %s", rank, even), seen.set()))
        even = await_result(ticket)
        seen.wait(5)
        return even
    r = world.receive(rank - 5, 0, Kind.I32)
    threading.Event().wait(EVENODD_DELAY)
    world.send(rank - 5, 0, r % 2 == 0)
    return r % 2 == 0


@register("matvec2d")
def matvec2d(world: Communicator) -> int:
    world_rank = world.rank
    row = world.split(world_rank // 3, world_rank)
    col = world.split(world_rank % 3, world_rank)
    a = world_rank + 1  # MAT in row-major order
    row_rank, col_rank = row.rank, col.rank

    # The last member of each row hands vector element i (= 1 + col rank,
    # which is the row index) to the row's diagonal member, whose row rank
    # equals its column rank.
    if row_rank == row.size - 1:
        row.send(col_rank, 0, 1 + col_rank)
    if row_rank == col_rank:
        x = row.receive(row.size - 1, 0, Kind.I32)
        col.broadcast(col_rank, x)
        multiplied = x * a
    else:
        # the diagonal of column j sits at column rank j == our row rank
        multiplied = a * col.broadcast(row_rank, kind=Kind.I32)
    return row.all_reduce(multiplied, lambda p, q: p + q)


@dataclass(frozen=True)
class Example:
    name: str
    function: Callable[[Communicator], Any]
    default_n: int
    required_n: Optional[int] = None
    summary: Callable[[List[Any]], str] = lambda results: ""

    def check_n(self, n: int) -> None:
        if n < 1:
            raise ValueError("process count must be >= 1")
        if self.required_n is not None and n != self.required_n:
            raise ValueError(f"{self.name} needs exactly {self.required_n} processes, got {n}")


def _matvec2d_summary(results: List[int]) -> str:
    rows = [results[i * 3] for i in range(3)]
    return f"row results {rows}"


EXAMPLES = {
    e.name: e
    for e in [
        Example("matvec", matvec, 8, summary=lambda res: f"sum {sum(res)}"),
        Example("ring", ring, 16, summary=lambda res: f"token returned to rank 0: {res[0]}"),
        Example("evenodd", evenodd, 10, required_n=10,
                summary=lambda res: "parities " + " ".join(
                    f"{r}:{'even' if b else 'odd'}" for r, b in enumerate(res[:5]))),
        Example("matvec2d", matvec2d, 9, required_n=9, summary=_matvec2d_summary),
    ]
}
