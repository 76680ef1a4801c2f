"""MPI-style communicators and ranked parallel closures over a small master/worker runtime."""

from .codec import Kind, decode, encode
from .comm import UNDEFINED, WORLD_CONTEXT, Communicator
from .errors import (
    CollectiveAborted,
    ConnectionLost,
    EncodeUnsupported,
    InvalidRank,
    InvalidTag,
    JobFailed,
    MalformedPayload,
    MPIgniteError,
    ProtocolError,
    ReceiveAborted,
    RegistryError,
    RoutingError,
    SplitProtocolError,
    TransportFailure,
    TypeMismatch,
    UsageError,
)
from .mailbox import ReceiveTicket, await_result
from .runtime import JobHandle, LocalContext, ParallelJob, parallelize_func, register
from .wire import Routing

__version__ = "0.1.0"

__all__ = [
    "CollectiveAborted",
    "Communicator",
    "ConnectionLost",
    "EncodeUnsupported",
    "InvalidRank",
    "InvalidTag",
    "JobFailed",
    "JobHandle",
    "Kind",
    "LocalContext",
    "MPIgniteError",
    "MalformedPayload",
    "ParallelJob",
    "ProtocolError",
    "ReceiveAborted",
    "ReceiveTicket",
    "RegistryError",
    "Routing",
    "RoutingError",
    "SplitProtocolError",
    "TransportFailure",
    "TypeMismatch",
    "UNDEFINED",
    "UsageError",
    "WORLD_CONTEXT",
    "await_result",
    "decode",
    "encode",
    "parallelize_func",
    "register",
]
