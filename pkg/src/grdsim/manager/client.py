"""Blocking client for the manager protocol."""

from __future__ import annotations

import socket
from collections import deque

from ..interp import Arg
from . import protocol as P
from .protocol import MsgType, Status


class ManagerError(Exception):
    def __init__(self, status: Status, message: str):
        self.status = status
        self.message = message
        super().__init__(f"{status.name}: {message}")


class Client:
    """One connection, hence one application.

    ``send``/``recv`` allow pipelining; the convenience methods send one
    request and wait for its response, raising :class:`ManagerError` on a
    non-OK status.
    """

    def __init__(self, path: str, timeout: float | None = 60.0):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        self.sock.connect(path)
        self.reader = P.FrameReader()
        self.pending: deque[tuple[int, bytes]] = deque()
        self.app_id: int | None = None
        self.base = self.size = 0

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- raw ------------------------------------------------------------------

    def send(self, kind: MsgType | int, payload: bytes = b"") -> None:
        self.sock.sendall(P.frame(int(kind), payload))

    def recv(self) -> tuple[Status, bytes]:
        while not self.pending:
            data = self.sock.recv(1 << 20)
            if not data:
                raise ConnectionError("manager closed the connection")
            self.pending.extend(self.reader.feed(data))
        kind, payload = self.pending.popleft()
        try:
            return Status(kind), payload
        except ValueError:
            raise ConnectionError(f"unknown status {kind}") from None

    def call(self, kind: MsgType | int, payload: bytes = b"") -> bytes:
        self.send(kind, payload)
        status, body = self.recv()
        if status is not Status.OK:
            raise ManagerError(status, body.decode(errors="replace"))
        return body

    # -- typed ----------------------------------------------------------------

    def init(self, req_bytes: int) -> tuple[int, int, int]:
        self.app_id, self.base, self.size = P.decode_init_ok(self.call(MsgType.INIT, P.encode_u64(req_bytes)))
        return self.app_id, self.base, self.size

    def malloc(self, size: int) -> int:
        return P.decode_u64(self.call(MsgType.MALLOC, P.encode_u64(size)))

    def free(self, addr: int) -> None:
        self.call(MsgType.FREE, P.encode_u64(addr))

    def h2d(self, dst: int, data: bytes) -> None:
        self.call(MsgType.MEMCPY_H2D, P.encode_h2d(dst, data))

    def d2h(self, src: int, n: int) -> bytes:
        return self.call(MsgType.MEMCPY_D2H, P.encode_d2h(src, n))

    def d2d(self, dst: int, src: int, n: int) -> None:
        self.call(MsgType.MEMCPY_D2D, P.encode_d2d(dst, src, n))

    def load_module(self, text: str) -> list[str]:
        body = self.call(MsgType.LOAD_MODULE, text.encode())
        return body.decode().split("\n") if body else []

    def launch(self, name: str, grid: int, block: int, args: list[Arg]) -> tuple[int, int]:
        """Launch and wait for completion; returns ``(oob_exits, steps)``."""
        req = P.LaunchRequest(name, grid, block, tuple(args))
        return P.decode_launch_ok(self.call(MsgType.LAUNCH, P.encode_launch(req)))

    def sync(self) -> None:
        self.call(MsgType.SYNC)

    def shutdown(self) -> None:
        self.call(MsgType.SHUTDOWN)
