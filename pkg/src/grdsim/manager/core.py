"""Transport-independent manager state machine.

Connections push decoded frames in with :meth:`Manager.receive`; responses
come back out of :meth:`Manager.take_output` in request order per connection.
All device state (partition table, simulated memory, symbol table) is owned
here and only mutated from :meth:`Manager.pump`, which the serving loop calls
from a single thread.

Request classes:

* immediate: INIT, MALLOC, LOAD_MODULE (answered on receipt);
* queued: LAUNCH, MEMCPY_D2D (validated on receipt, answered on completion);
* draining: SYNC, MEMCPY_H2D, MEMCPY_D2H, FREE (wait until the caller's
  queue is empty, then run), and SHUTDOWN (waits for every queue).
"""

from __future__ import annotations

import logging
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from ..allocator import DEFAULT_DEVICE_BASE, DEFAULT_DEVICE_SIZE, PartitionBoundsTable
from ..errors import (
    AddressSize32Error, AlreadySandboxed, BranchFault, DeviceFault, DeviceOom, ExecutionError,
    InvalidSize, PartitionOom, PtxSyntaxError, StepLimitExceeded, TypeFault, UnknownAlloc,
    UnsupportedFeature,
)
from ..interp import (
    AccessTrace, Arg, KernelHandle, LaunchConfig, SimMemory, compile_module, launch,
)
from ..interp.machine import DEFAULT_STEP_LIMIT, MAX_THREADS
from ..patcher import FenceParams, SandboxMode, sandbox_module
from ..ptx import parse_module
from . import protocol as P
from .protocol import MsgType, Status

log = logging.getLogger(__name__)

_FAULT_STATUS = {StepLimitExceeded: Status.STEP_LIMIT, BranchFault: Status.DEVICE_FAULT,
                 TypeFault: Status.TYPE_FAULT}

DRAINING = frozenset({MsgType.SYNC, MsgType.MEMCPY_H2D, MsgType.MEMCPY_D2H, MsgType.FREE})


@dataclass
class ManagerConfig:
    mode: SandboxMode = SandboxMode.FENCE_BITWISE
    device_base: int = DEFAULT_DEVICE_BASE
    device_size: int = DEFAULT_DEVICE_SIZE
    native_when_solo: bool = False
    unprotected: bool = False  # skip patching entirely (demonstrates the hazard)
    inline_reciprocal: bool = False
    strict: bool = True
    step_limit: int = DEFAULT_STEP_LIMIT
    lazy_dispatch: bool = False  # run tasks only while some client waits on a drain
    record_traces: bool = False


@dataclass
class SymbolEntry:
    sandboxed: KernelHandle
    native: KernelHandle
    mode: SandboxMode | None  # None when the manager runs unprotected


class SymbolTable:
    """Global kernel namespace; the last load of a name wins."""

    def __init__(self):
        self.entries: dict[str, SymbolEntry] = {}

    def register(self, name: str, entry: SymbolEntry) -> None:
        if name in self.entries:
            log.warning("kernel %s replaced by a newer module", name)
        self.entries[name] = entry

    def lookup(self, name: str) -> SymbolEntry | None:
        return self.entries.get(name)


@dataclass
class _Slot:
    frame: bytes | None = None


@dataclass
class Task:
    app_id: int
    seq: int  # per-client submission number
    kind: str  # "launch" | "d2d"
    slot: _Slot
    name: str = ""
    entry: SymbolEntry | None = None
    grid: int = 0
    block: int = 0
    args: tuple[Arg, ...] = ()
    copy: tuple[int, int, int] = (0, 0, 0)  # dst, src, len


@dataclass(frozen=True)
class DispatchRecord:
    index: int
    app_id: int
    seq: int
    kind: str
    name: str
    status: Status
    waiting: frozenset[int]  # clients whose queue was non-empty when this task was picked
    native: bool = False
    oob_exits: int = 0
    trace: AccessTrace | None = None


@dataclass
class _Conn:
    cid: int
    inbox: deque = field(default_factory=deque)
    slots: deque = field(default_factory=deque)
    out: list = field(default_factory=list)
    app_id: int | None = None
    queue: deque = field(default_factory=deque)
    submitted: int = 0
    closed: bool = False
    shutdown_slot: _Slot | None = None


class Manager:
    def __init__(self, config: ManagerConfig | None = None):
        self.config = config or ManagerConfig()
        c = self.config
        self.table = PartitionBoundsTable(c.device_base, c.device_size)
        self.mem = SimMemory(c.device_base, c.device_size)
        self.symtab = SymbolTable()
        self.conns: dict[int, _Conn] = {}
        self.order: list[int] = []  # connection ids in INIT order
        self._rr = 0
        self._next_cid = 1
        self._next_app = 1
        self.dispatch_log: list[DispatchRecord] = []
        self.shutdown_requested = False
        self.stopped = False

    # -- connection lifecycle -------------------------------------------------

    def connect(self) -> int:
        cid = self._next_cid
        self._next_cid += 1
        self.conns[cid] = _Conn(cid)
        return cid

    def disconnect(self, cid: int) -> None:
        """Drop a connection, its queued tasks and its partition."""
        conn = self.conns.pop(cid, None)
        if conn is None:
            return
        conn.closed = True
        if conn.queue:
            log.info("client %s left with %d queued tasks; dropping them", conn.app_id, len(conn.queue))
        if cid in self.order:
            i = self.order.index(cid)
            self.order.pop(i)
            if i < self._rr:
                self._rr -= 1
            if self._rr >= len(self.order):
                self._rr = 0
        if conn.app_id is not None:
            rec = self.table.record(conn.app_id)
            self.mem.clear(rec.base, rec.size)
            self.table.destroy_partition(conn.app_id)

    def receive(self, cid: int, kind: int, payload: bytes) -> None:
        self.conns[cid].inbox.append((kind, payload))

    def take_output(self, cid: int) -> list[bytes]:
        conn = self.conns.get(cid)
        if conn is None:
            return []
        out, conn.out = conn.out, []
        return out

    def app_of(self, cid: int) -> int | None:
        return self.conns[cid].app_id

    # -- main loop hooks ------------------------------------------------------

    def pump(self, dispatch_limit: int | None = None) -> int:
        """Handle every request that can proceed and dispatch tasks.

        Returns the number of tasks dispatched.  With ``dispatch_limit`` the
        loop stops after that many dispatches so a server can interleave I/O.
        """
        ran = 0
        while True:
            self._process_all()
            if self.stopped or not self.should_dispatch():
                break
            if dispatch_limit is not None and ran >= dispatch_limit:
                break
            self.dispatch_one()
            ran += 1
        self._process_all()
        return ran

    def should_dispatch(self) -> bool:
        if not any(self.conns[c].queue for c in self.order):
            return False
        if not self.config.lazy_dispatch:
            return True
        return self.shutdown_requested or any(self._blocked(c) for c in self.conns.values())

    def _blocked(self, conn: _Conn) -> bool:
        """True when the client is provably waiting on its own queue."""
        if not conn.queue:
            return False
        if conn.inbox and conn.inbox[0][0] in DRAINING:
            return True
        # an answered request held back behind an unfinished task
        return any(s.frame is not None for s in conn.slots)

    def _process_all(self) -> None:
        for conn in list(self.conns.values()):
            self._process(conn)
        if self.shutdown_requested and not self.stopped:
            if not any(c.queue for c in self.conns.values()):
                self.stopped = True
                for conn in self.conns.values():
                    if conn.shutdown_slot is not None:
                        conn.shutdown_slot.frame = P.frame(Status.OK)
                        self._flush(conn)

    def _process(self, conn: _Conn) -> None:
        while conn.inbox and not self.stopped:
            kind, payload = conn.inbox[0]
            if kind in DRAINING and conn.queue:
                return
            conn.inbox.popleft()
            slot = _Slot()
            conn.slots.append(slot)
            try:
                self._handle(conn, kind, payload, slot)
            except P.ProtocolError as e:
                slot.frame = P.frame(Status.BAD_MESSAGE, str(e).encode())
            self._flush(conn)

    def _flush(self, conn: _Conn) -> None:
        while conn.slots and conn.slots[0].frame is not None:
            conn.out.append(conn.slots.popleft().frame)

    # -- request handlers -----------------------------------------------------

    def _handle(self, conn: _Conn, kind: int, payload: bytes, slot: _Slot) -> None:
        def reply(status: Status, body: bytes | str = b""):
            slot.frame = P.frame(status, body.encode() if isinstance(body, str) else body)

        try:
            mt = MsgType(kind)
        except ValueError:
            return reply(Status.BAD_MESSAGE, f"unknown message type {kind}")
        if self.shutdown_requested and mt is not MsgType.SHUTDOWN:
            return reply(Status.SHUTTING_DOWN, "manager is shutting down")
        if mt is MsgType.INIT:
            return self._init(conn, P.decode_u64(payload), reply)
        if mt is MsgType.SHUTDOWN:
            if payload:
                raise P.ProtocolError("SHUTDOWN carries no payload")
            self.shutdown_requested = True
            conn.shutdown_slot = slot
            return None
        if conn.app_id is None:
            return reply(Status.NO_PARTITION, "INIT must come first")
        app = conn.app_id
        if mt is MsgType.MALLOC:
            size = P.decode_u64(payload)
            try:
                return reply(Status.OK, P.encode_u64(self.table.device_malloc(app, size)))
            except InvalidSize as e:
                return reply(Status.INVALID_SIZE, str(e))
            except PartitionOom as e:
                return reply(Status.PARTITION_OOM, str(e))
        if mt is MsgType.FREE:
            try:
                self.table.device_free(app, P.decode_u64(payload))
            except UnknownAlloc as e:
                return reply(Status.UNKNOWN_ALLOC, str(e))
            return reply(Status.OK)
        if mt is MsgType.MEMCPY_H2D:
            dst, data = P.decode_h2d(payload)
            st = self.handle_memcpy("h2d", app, dst=dst, length=len(data), payload=data)
            return reply(*st)
        if mt is MsgType.MEMCPY_D2H:
            src, n = P.decode_d2h(payload)
            return reply(*self.handle_memcpy("d2h", app, src=src, length=n))
        if mt is MsgType.MEMCPY_D2D:
            dst, src, n = P.decode_d2d(payload)
            status, msg = self.handle_memcpy("check-d2d", app, dst=dst, src=src, length=n)
            if status is not Status.OK:
                return reply(status, msg)
            self._enqueue(conn, Task(app, conn.submitted, "d2d", slot, copy=(dst, src, n)))
            return None
        if mt is MsgType.LOAD_MODULE:
            try:
                text = payload.decode()
            except UnicodeDecodeError:
                raise P.ProtocolError("module text is not UTF-8") from None
            return reply(*self.handle_load_module(text))
        if mt is MsgType.LAUNCH:
            req = P.decode_launch(payload)
            status, msg, entry = self._validate_launch(req)
            if status is not Status.OK:
                return reply(status, msg)
            self._enqueue(conn, Task(app, conn.submitted, "launch", slot, req.name, entry,
                                     req.grid, req.block, req.args))
            return None
        if mt is MsgType.SYNC:
            if payload:
                raise P.ProtocolError("SYNC carries no payload")
            return reply(Status.OK)
        raise AssertionError(mt)

    def _init(self, conn: _Conn, req_bytes: int, reply) -> None:
        if conn.app_id is not None:
            return reply(Status.ALREADY_INIT, f"connection already owns app {conn.app_id}")
        app = self._next_app
        try:
            rec = self.table.create_partition(app, req_bytes)
        except InvalidSize as e:
            return reply(Status.INVALID_SIZE, str(e))
        except DeviceOom as e:
            return reply(Status.DEVICE_OOM, str(e))
        self._next_app += 1
        conn.app_id = app
        self.order.append(conn.cid)
        log.info("app %d: partition 0x%x + 0x%x", app, rec.base, rec.size)
        return reply(Status.OK, P.encode_init_ok(app, rec.base, rec.size))

    def handle_memcpy(self, direction: str, app_id: int, *, dst: int = 0, src: int = 0,
                      length: int = 0, payload: bytes = b"") -> tuple[Status, bytes | str]:
        """Validate and (for h2d/d2h) perform a copy; ``check-d2d`` only validates."""
        t = self.table
        if direction in ("h2d", "check-d2d") and not t.check_range(app_id, dst, length):
            return Status.OOB_TRANSFER, f"destination 0x{dst:x}+{length} leaves the partition"
        if direction in ("d2h", "check-d2d") and not t.check_range(app_id, src, length):
            return Status.OOB_TRANSFER, f"source 0x{src:x}+{length} leaves the partition"
        if direction == "h2d":
            if length:
                self.mem.write(dst, payload)
            return Status.OK, b""
        if direction == "d2h":
            return Status.OK, self.mem.read(src, length) if length else b""
        return Status.OK, b""

    def handle_load_module(self, text: str, origin: str = "client") -> tuple[Status, str]:
        c = self.config
        try:
            m = parse_module(text, strict=c.strict)
            if c.unprotected:
                native = compile_module(m)
                sandboxed, mode = native, None
            else:
                sm, _ = sandbox_module(m, c.mode, inline_reciprocal=c.inline_reciprocal)
                native = compile_module(m)
                sandboxed, mode = compile_module(sm), c.mode
        except PtxSyntaxError as e:
            return Status.SYNTAX_ERROR, str(e)
        except (UnsupportedFeature, AddressSize32Error, AlreadySandboxed, TypeFault) as e:
            return Status.UNSUPPORTED, str(e)
        names = []
        for k in m.entries:
            self.symtab.register(k.name, SymbolEntry(
                KernelHandle(k.name, sandboxed.module.kernel(k.name), sandboxed),
                KernelHandle(k.name, k, native), mode))
            names.append(k.name)
        log.info("%s loaded kernels %s", origin, ", ".join(names) or "(none)")
        return Status.OK, "\n".join(names)

    def load_directory(self, path: str | os.PathLike) -> list[str]:
        """Patch and register every ``*.ptx`` under ``path``; return failures."""
        failures = []
        for f in sorted(Path(path).glob("*.ptx")):
            status, msg = self.handle_load_module(f.read_text(), origin=str(f))
            if status is not Status.OK:
                failures.append(f"{f}: {msg}")
                log.error("%s: %s", f, msg)
        return failures

    def _validate_launch(self, req: P.LaunchRequest):
        entry = self.symtab.lookup(req.name)
        if entry is None:
            return Status.UNKNOWN_KERNEL, f"unknown kernel {req.name!r}", None
        params = entry.native.kernel.params
        if len(req.args) != len(params):
            return (Status.BAD_MESSAGE,
                    f"{req.name} takes {len(params)} arguments, got {len(req.args)}", None)
        for a, p in zip(req.args, params):
            if a.kind.width != p.size:
                return (Status.BAD_MESSAGE,
                        f"argument for {p.name} is {a.kind.width} bytes, parameter is {p.size}", None)
        if req.grid < 1 or req.block < 1 or req.grid * req.block > MAX_THREADS:
            return Status.BAD_MESSAGE, f"launch geometry {req.grid}x{req.block} out of range", None
        return Status.OK, "", entry

    def _enqueue(self, conn: _Conn, task: Task) -> None:
        conn.queue.append(task)
        conn.submitted += 1

    # -- scheduling -----------------------------------------------------------

    def dispatch_one(self) -> DispatchRecord | None:
        """Run the next task in round-robin order over clients (INIT order)."""
        n = len(self.order)
        for step in range(n):
            i = (self._rr + step) % n
            conn = self.conns[self.order[i]]
            if conn.queue:
                break
        else:
            return None
        waiting = frozenset(self.conns[c].app_id for c in self.order if self.conns[c].queue)
        task = conn.queue.popleft()
        self._rr = (i + 1) % n
        rec = self._execute(task, waiting)
        self.dispatch_log.append(rec)
        self._flush(conn)
        return rec

    def _execute(self, task: Task, waiting: frozenset[int]) -> DispatchRecord:
        index = len(self.dispatch_log)
        if task.kind == "d2d":
            dst, src, n = task.copy
            if n:
                self.mem.write(dst, self.mem.read(src, n))
            task.slot.frame = P.frame(Status.OK)
            return DispatchRecord(index, task.app_id, task.seq, "d2d", "", Status.OK, waiting)
        rec = self.table.record(task.app_id)
        entry = task.entry
        solo = self.config.native_when_solo and len(self.order) == 1
        native = entry.mode is None or solo
        if native:
            handle, args = entry.native, task.args
        else:
            fence = FenceParams(entry.mode, rec.base, rec.size)
            handle, args = entry.sandboxed, (*task.args, *fence.values())
        cfg = LaunchConfig(task.grid, task.block, tuple(args), local_top=rec.end)
        status, body = Status.OK, b""
        try:
            trace = launch(handle, cfg, self.mem, self.config.step_limit)
            body = P.encode_launch_ok(trace.oob_exits, trace.steps)
        except ExecutionError as e:
            status = _FAULT_STATUS.get(type(e), Status.TYPE_FAULT)
            if isinstance(e, DeviceFault):
                status = Status.DEVICE_FAULT
            body, trace = str(e).encode(), getattr(e, "trace", None)
        task.slot.frame = P.frame(status, body)
        log.debug("dispatch %d: app %d %s -> %s", index, task.app_id, task.name, status.name)
        return DispatchRecord(index, task.app_id, task.seq, "launch", task.name, status, waiting,
                              native, trace.oob_exits if trace else 0,
                              trace if self.config.record_traces else None)

