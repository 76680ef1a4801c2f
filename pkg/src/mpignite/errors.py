"""Exception hierarchy shared by every layer of the runtime."""


class MPIgniteError(Exception):
    pass


# codec
class CodecError(MPIgniteError):
    pass


class EncodeUnsupported(CodecError, TypeError):
    pass


class TypeMismatch(CodecError, TypeError):
    pass


class MalformedPayload(CodecError, ValueError):
    pass


# wire
class ProtocolError(MPIgniteError):
    """Bad magic, version or frame kind; the connection must be dropped."""


class FrameTooLarge(ProtocolError):
    pass


class ConnectionLost(MPIgniteError, ConnectionError):
    pass


# transport
class RoutingError(MPIgniteError):
    pass


class TransportFailure(MPIgniteError):
    pass


# mailbox / comm
class ReceiveAborted(MPIgniteError):
    pass


class CollectiveAborted(ReceiveAborted):
    pass


class InvalidRank(MPIgniteError, ValueError):
    pass


class InvalidTag(MPIgniteError, ValueError):
    pass


class UsageError(MPIgniteError, ValueError):
    pass


class SplitProtocolError(MPIgniteError):
    pass


# runtime
class RegistryError(MPIgniteError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class JobFailed(MPIgniteError):
    """A parallel job aborted.

    ``rank`` is the world rank whose function raised first (None when the
    failure was not caused by a rank, e.g. a worker disconnect) and
    ``errors`` maps every failed rank to its diagnostic text.
    """

    def __init__(self, job_id: int, rank, errors: dict):
        self.job_id = job_id
        self.rank = rank
        self.errors = dict(errors)
        where = f"rank {rank}" if rank is not None else "runtime"
        detail = errors.get(rank) if rank is not None else next(iter(errors.values()), "")
        super().__init__(f"job {job_id} failed at {where}: {detail}")
