"""Unix-socket front end for :class:`~grdsim.manager.core.Manager`."""

from __future__ import annotations

import logging
import os
import selectors
import socket
import threading

from .core import Manager
from .protocol import FrameReader, ProtocolError, Status, frame

log = logging.getLogger(__name__)


class _Peer:
    def __init__(self, sock: socket.socket, cid: int):
        self.sock = sock
        self.cid = cid
        self.reader = FrameReader()
        self.outbuf = bytearray()
        self.closing = False


class Server:
    """Single-threaded event loop: every manager call happens on this thread.

    All readable input is drained before each dispatched task, so a client
    that pipelines requests sees them enqueued in the order it sent them.
    """

    def __init__(self, manager: Manager, path: str):
        self.manager = manager
        self.path = path
        self.sel = selectors.DefaultSelector()
        self.peers: dict[socket.socket, _Peer] = {}
        self.listener: socket.socket | None = None
        self.ready = threading.Event()
        self._wake_r, self._wake_w = socket.socketpair()

    def bind(self) -> None:
        if os.path.exists(self.path):
            os.unlink(self.path)
        s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        s.bind(self.path)
        s.listen(64)
        s.setblocking(False)
        self.listener = s
        self.sel.register(s, selectors.EVENT_READ, "accept")
        self._wake_r.setblocking(False)
        self.sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        self.ready.set()

    def stop(self) -> None:
        """Ask the loop to exit from another thread."""
        self.manager.stopped = True
        try:
            self._wake_w.send(b"x")
        except OSError:
            pass

    def serve_forever(self) -> int:
        if self.listener is None:
            self.bind()
        m = self.manager
        try:
            while True:
                busy = m.should_dispatch()
                events = self.sel.select(0 if busy else None)
                if events:
                    for key, mask in events:
                        self._event(key, mask)
                    m.pump(dispatch_limit=0)
                else:
                    m.pump(dispatch_limit=1)
                self._collect_output()
                if m.stopped and not any(p.outbuf for p in self.peers.values()):
                    break
        finally:
            self.close()
        return 0

    # -- events ---------------------------------------------------------------

    def _event(self, key, mask) -> None:
        if key.data == "accept":
            try:
                sock, _ = self.listener.accept()
            except BlockingIOError:
                return
            sock.setblocking(False)
            peer = _Peer(sock, self.manager.connect())
            self.peers[sock] = peer
            self.sel.register(sock, selectors.EVENT_READ, "peer")
            return
        if key.data == "wake":
            try:
                self._wake_r.recv(64)
            except BlockingIOError:
                pass
            return
        peer = self.peers.get(key.fileobj)
        if peer is None:
            return
        if mask & selectors.EVENT_WRITE:
            self._write(peer)
        if mask & selectors.EVENT_READ:
            self._read(peer)

    def _read(self, peer: _Peer) -> None:
        try:
            data = peer.sock.recv(1 << 20)
        except (BlockingIOError, InterruptedError):
            return
        except OSError as e:
            log.warning("client %d: %s", peer.cid, e)
            data = b""
        if not data:
            self._drop(peer)
            return
        try:
            frames = peer.reader.feed(data)
        except ProtocolError as e:
            # framing is lost; answer once and hang up
            peer.outbuf += frame(Status.BAD_MESSAGE, str(e).encode())
            peer.closing = True
            self._write(peer)
            return
        for kind, payload in frames:
            self.manager.receive(peer.cid, kind, payload)

    def _collect_output(self) -> None:
        for peer in list(self.peers.values()):
            for f in self.manager.take_output(peer.cid):
                peer.outbuf += f
            if peer.outbuf:
                self._write(peer)

    def _write(self, peer: _Peer) -> None:
        try:
            n = peer.sock.send(peer.outbuf)
            del peer.outbuf[:n]
        except (BlockingIOError, InterruptedError):
            pass
        except OSError as e:
            log.warning("client %d: %s", peer.cid, e)
            self._drop(peer)
            return
        want = selectors.EVENT_READ | (selectors.EVENT_WRITE if peer.outbuf else 0)
        if peer.closing and not peer.outbuf:
            self._drop(peer)
            return
        self.sel.modify(peer.sock, want, "peer")

    def _drop(self, peer: _Peer) -> None:
        if self.peers.pop(peer.sock, None) is None:
            return
        self.sel.unregister(peer.sock)
        peer.sock.close()
        self.manager.disconnect(peer.cid)
        log.info("client %d disconnected", peer.cid)

    def close(self) -> None:
        for peer in list(self.peers.values()):
            self.sel.unregister(peer.sock)
            peer.sock.close()
        self.peers.clear()
        if self.listener is not None:
            self.sel.unregister(self.listener)
            self.listener.close()
            self.listener = None
            if os.path.exists(self.path):
                os.unlink(self.path)
        self.sel.close()
        self._wake_r.close()
        self._wake_w.close()


def serve(manager: Manager, path: str) -> int:
    """Run until SHUTDOWN; returns the process exit status."""
    return Server(manager, path).serve_forever()


class BackgroundServer:
    """Server on a daemon thread, for in-process use and tests."""

    def __init__(self, manager: Manager, path: str):
        self.server = Server(manager, path)
        self.server.bind()
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def manager(self) -> Manager:
        return self.server.manager

    def close(self, timeout: float = 10.0) -> None:
        if self.thread.is_alive():
            self.server.stop()
            self.thread.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
