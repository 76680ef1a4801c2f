"""
Canonical binary encoding for message payloads and result values.

Every payload starts with a one-byte kind tag followed by the body:

    I32 / I64   little-endian two's complement, 4 / 8 bytes
    F64         little-endian IEEE-754 double
    BOOL        one byte, 0x00 or 0x01
    STR         u32 byte length + UTF-8 bytes
    BYTES       u32 byte length + raw bytes
    NONE        empty body (unit results)
    ARRAY_*     u32 element count + elements encoded without their own tag

Array kinds are the scalar tag with the high bit set, so ``ARRAY_I32`` is
``0x81``. Arrays of arrays are not supported; applications flatten or ship
their own byte layout.
"""

from __future__ import annotations

import struct
from enum import IntEnum
from typing import Any, Optional

from .errors import EncodeUnsupported, MalformedPayload, TypeMismatch

__all__ = [
    "Kind",
    "array_of",
    "decode",
    "encode",
    "infer_kind",
    "kind_of",
]

_ARRAY_BIT = 0x80

I32_MIN, I32_MAX = -(2**31), 2**31 - 1
I64_MIN, I64_MAX = -(2**63), 2**63 - 1


class Kind(IntEnum):
    NONE = 0x00
    I32 = 0x01
    I64 = 0x02
    F64 = 0x03
    BOOL = 0x04
    STR = 0x05
    BYTES = 0x06
    ARRAY_I32 = 0x81
    ARRAY_I64 = 0x82
    ARRAY_F64 = 0x83
    ARRAY_BOOL = 0x84
    ARRAY_STR = 0x85
    ARRAY_BYTES = 0x86

    @property
    def is_array(self) -> bool:
        return bool(self & _ARRAY_BIT)

    @property
    def element(self) -> "Kind":
        if not self.is_array:
            raise ValueError(f"{self.name} is not an array kind")
        return Kind(self & ~_ARRAY_BIT)


def array_of(kind: Kind) -> Kind:
    if kind.is_array or kind is Kind.NONE:
        raise EncodeUnsupported(f"no array kind for {kind.name}")
    return Kind(kind | _ARRAY_BIT)


_FIXED = {
    Kind.I32: struct.Struct("<i"),
    Kind.I64: struct.Struct("<q"),
    Kind.F64: struct.Struct("<d"),
}
_U32 = struct.Struct("<I")


def _scalar_kind(value: Any) -> Kind:
    # bool before int: bool is an int subclass
    if isinstance(value, bool):
        return Kind.BOOL
    if isinstance(value, int):
        if I32_MIN <= value <= I32_MAX:
            return Kind.I32
        if I64_MIN <= value <= I64_MAX:
            return Kind.I64
        raise EncodeUnsupported(f"integer {value} does not fit in 64 bits")
    if isinstance(value, float):
        return Kind.F64
    if isinstance(value, str):
        return Kind.STR
    if isinstance(value, (bytes, bytearray, memoryview)):
        return Kind.BYTES
    raise EncodeUnsupported(f"unsupported payload type {type(value).__name__}")


def infer_kind(value: Any) -> Kind:
    """Pick the narrowest kind able to carry ``value``.

    Integers become I32 when they fit and I64 otherwise; a list of integers
    becomes ARRAY_I64 as soon as one element needs 64 bits. Empty sequences
    are ARRAY_I32.
    """
    if value is None:
        return Kind.NONE
    if isinstance(value, (list, tuple)):
        if not value:
            return Kind.ARRAY_I32
        kinds = {_scalar_kind(v) for v in value}
        if kinds == {Kind.I32, Kind.I64}:
            return Kind.ARRAY_I64
        if len(kinds) != 1:
            names = sorted(k.name for k in kinds)
            raise EncodeUnsupported(f"array elements are not homogeneous: {names}")
        return array_of(kinds.pop())
    return _scalar_kind(value)


def _check_scalar(value: Any, kind: Kind) -> None:
    if kind is Kind.BOOL:
        ok = isinstance(value, bool)
    elif kind in (Kind.I32, Kind.I64):
        lo, hi = (I32_MIN, I32_MAX) if kind is Kind.I32 else (I64_MIN, I64_MAX)
        ok = isinstance(value, int) and not isinstance(value, bool)
        if ok and not lo <= value <= hi:
            raise EncodeUnsupported(f"{value} out of range for {kind.name}")
    elif kind is Kind.F64:
        ok = isinstance(value, (float, int)) and not isinstance(value, bool)
    elif kind is Kind.STR:
        ok = isinstance(value, str)
    elif kind is Kind.BYTES:
        ok = isinstance(value, (bytes, bytearray, memoryview))
    else:
        ok = False
    if not ok:
        raise EncodeUnsupported(f"cannot encode {type(value).__name__} as {kind.name}")


def _encode_scalar(out: bytearray, value: Any, kind: Kind) -> None:
    fixed = _FIXED.get(kind)
    if fixed is not None:
        out += fixed.pack(float(value) if kind is Kind.F64 else value)
    elif kind is Kind.BOOL:
        out.append(1 if value else 0)
    else:
        raw = value.encode("utf-8") if kind is Kind.STR else bytes(value)
        out += _U32.pack(len(raw))
        out += raw


def encode(value: Any, kind: Optional[Kind] = None) -> bytes:
    """Encode ``value`` as tagged payload bytes.

    ``kind`` forces the encoded shape (e.g. ``Kind.I64`` for a small int);
    otherwise it is inferred with :func:`infer_kind`.
    """
    kind = infer_kind(value) if kind is None else Kind(kind)
    out = bytearray([kind])
    if kind is Kind.NONE:
        if value is not None:
            raise EncodeUnsupported("only None encodes as NONE")
    elif kind.is_array:
        if not isinstance(value, (list, tuple)):
            raise EncodeUnsupported(f"{kind.name} needs a list or tuple")
        if len(value) > 0xFFFFFFFF:
            raise EncodeUnsupported("array too long")
        elem = kind.element
        out += _U32.pack(len(value))
        for v in value:
            _check_scalar(v, elem)
            _encode_scalar(out, v, elem)
    else:
        _check_scalar(value, kind)
        _encode_scalar(out, value, kind)
    return bytes(out)


def kind_of(payload: bytes) -> Kind:
    if not payload:
        raise MalformedPayload("empty payload")
    try:
        return Kind(payload[0])
    except ValueError:
        raise MalformedPayload(f"unknown kind tag 0x{payload[0]:02x}") from None


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int) -> None:
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedPayload(
                f"truncated payload: need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def scalar(self, kind: Kind) -> Any:
        fixed = _FIXED.get(kind)
        if fixed is not None:
            return fixed.unpack(self.take(fixed.size))[0]
        if kind is Kind.BOOL:
            b = self.take(1)[0]
            if b > 1:
                raise MalformedPayload(f"invalid boolean byte 0x{b:02x}")
            return b == 1
        (n,) = _U32.unpack(self.take(4))
        raw = self.take(n)
        if kind is Kind.STR:
            try:
                return raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise MalformedPayload(f"invalid UTF-8 string: {e}") from None
        return bytes(raw)


def decode(payload: bytes, expected: Optional[Kind] = None) -> Any:
    """Decode tagged payload bytes.

    With ``expected`` set, a payload of any other kind raises
    :class:`TypeMismatch`. Arrays decode to lists. Trailing bytes after the
    value are treated as corruption.
    """
    kind = kind_of(payload)
    if expected is not None and kind != expected:
        raise TypeMismatch(f"expected {Kind(expected).name}, payload holds {kind.name}")
    r = _Reader(bytes(payload), 1)
    if kind is Kind.NONE:
        value = None
    elif kind.is_array:
        (count,) = _U32.unpack(r.take(4))
        elem = kind.element
        value = [r.scalar(elem) for _ in range(count)]
    else:
        value = r.scalar(kind)
    if r.pos != len(r.buf):
        raise MalformedPayload(f"{len(r.buf) - r.pos} trailing bytes after {kind.name}")
    return value

