"""Binary framing between clients and the manager.

A frame is ``u32 length | u16 type | payload`` with ``length`` counting only
the payload.  Requests carry a :class:`MsgType`; responses reuse the same
header with a :class:`Status` in the type slot.  All integers are
little-endian.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..interp import Arg, ArgKind
from ..interp.semantics import f32_to_bits

HEADER = struct.Struct("<IH")
MAX_PAYLOAD = 1 << 30


class MsgType(enum.IntEnum):
    INIT = 1
    MALLOC = 2
    FREE = 3
    MEMCPY_H2D = 4
    MEMCPY_D2H = 5
    MEMCPY_D2D = 6
    LOAD_MODULE = 7
    LAUNCH = 8
    SYNC = 9
    SHUTDOWN = 10


class Status(enum.IntEnum):
    OK = 0
    BAD_MESSAGE = 1
    NO_PARTITION = 2
    OOB_TRANSFER = 3
    UNKNOWN_KERNEL = 4
    DEVICE_OOM = 5
    PARTITION_OOM = 6
    INVALID_SIZE = 7
    UNKNOWN_ALLOC = 8
    SYNTAX_ERROR = 9
    DEVICE_FAULT = 10
    STEP_LIMIT = 11
    TYPE_FAULT = 12
    ALREADY_INIT = 13
    UNSUPPORTED = 14
    SHUTTING_DOWN = 15


class ProtocolError(Exception):
    """Payload does not decode for its message type."""


def frame(kind: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(len(payload), kind) + payload


class FrameReader:
    """Incremental decoder: feed bytes, collect complete ``(kind, payload)`` frames."""

    def __init__(self, max_payload: int = MAX_PAYLOAD):
        self.buf = bytearray()
        self.max_payload = max_payload

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self.buf += data
        out = []
        while len(self.buf) >= HEADER.size:
            length, kind = HEADER.unpack_from(self.buf)
            if length > self.max_payload:
                raise ProtocolError(f"frame of {length} bytes exceeds the {self.max_payload}-byte limit")
            end = HEADER.size + length
            if len(self.buf) < end:
                break
            out.append((kind, bytes(self.buf[HEADER.size:end])))
            del self.buf[:end]
        return out


# -- request payloads ---------------------------------------------------------

_Q = struct.Struct("<Q")
_QQ = struct.Struct("<QQ")
_QQQ = struct.Struct("<QQQ")
_LAUNCH = struct.Struct("<II")
_ARG = struct.Struct("<BQ")
_INIT_OK = struct.Struct("<IQQ")
_LAUNCH_OK = struct.Struct("<IQ")


@dataclass(frozen=True)
class LaunchRequest:
    name: str
    grid: int
    block: int
    args: tuple[Arg, ...]


def _exact(s: struct.Struct, payload: bytes) -> tuple:
    if len(payload) != s.size:
        raise ProtocolError(f"expected a {s.size}-byte payload, got {len(payload)}")
    return s.unpack(payload)


def encode_u64(v: int) -> bytes:
    return _Q.pack(v)


def decode_u64(payload: bytes) -> int:
    return _exact(_Q, payload)[0]


def encode_h2d(dst: int, data: bytes) -> bytes:
    return _QQ.pack(dst, len(data)) + data


def decode_h2d(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < _QQ.size:
        raise ProtocolError("truncated MEMCPY_H2D")
    dst, n = _QQ.unpack_from(payload)
    data = payload[_QQ.size:]
    if len(data) != n:
        raise ProtocolError(f"MEMCPY_H2D declares {n} bytes but carries {len(data)}")
    return dst, data


def encode_d2h(src: int, n: int) -> bytes:
    return _QQ.pack(src, n)


def decode_d2h(payload: bytes) -> tuple[int, int]:
    return _exact(_QQ, payload)


def encode_d2d(dst: int, src: int, n: int) -> bytes:
    return _QQQ.pack(dst, src, n)


def decode_d2d(payload: bytes) -> tuple[int, int, int]:
    return _exact(_QQQ, payload)


def encode_launch(req: LaunchRequest) -> bytes:
    name = req.name.encode()
    out = bytearray(struct.pack("<H", len(name)) + name)
    out += _LAUNCH.pack(req.grid, req.block)
    out += struct.pack("<H", len(req.args))
    for a in req.args:
        value = a.value
        if isinstance(value, float):
            value = f32_to_bits(value)
        out += _ARG.pack(a.kind.value, value & ((1 << (8 * a.kind.width)) - 1))
    return bytes(out)


def decode_launch(payload: bytes) -> LaunchRequest:
    try:
        (n,) = struct.unpack_from("<H", payload)
        pos = 2
        name = payload[pos:pos + n].decode()
        if len(name.encode()) != n:
            raise ProtocolError("truncated kernel name")
        pos += n
        grid, block = _LAUNCH.unpack_from(payload, pos)
        pos += _LAUNCH.size
        (count,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        args = []
        for _ in range(count):
            kind, value = _ARG.unpack_from(payload, pos)
            pos += _ARG.size
            try:
                k = ArgKind(kind)
            except ValueError:
                raise ProtocolError(f"unknown argument kind {kind}") from None
            if k.width == 4 and value >> 32:
                raise ProtocolError(f"argument {value:#x} does not fit 32 bits")
            args.append(Arg(k, value))
    except (struct.error, UnicodeDecodeError) as e:
        raise ProtocolError(f"malformed LAUNCH: {e}") from None
    if pos != len(payload):
        raise ProtocolError("trailing bytes after LAUNCH arguments")
    return LaunchRequest(name, grid, block, tuple(args))


# -- response payloads --------------------------------------------------------


def encode_init_ok(app_id: int, base: int, size: int) -> bytes:
    return _INIT_OK.pack(app_id, base, size)


def decode_init_ok(payload: bytes) -> tuple[int, int, int]:
    return _exact(_INIT_OK, payload)


def encode_launch_ok(oob_exits: int, steps: int) -> bytes:
    return _LAUNCH_OK.pack(oob_exits, steps)


def decode_launch_ok(payload: bytes) -> tuple[int, int]:
    return _exact(_LAUNCH_OK, payload)
