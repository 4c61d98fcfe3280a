"""Declarative multi-client scenarios and their runner.

A scenario declares clients with ``client <id> partition <bytes>`` and then
lists operations as ``<id>: <op> ...`` in submission order.  See
``docs/scenario.md`` for the grammar.
"""

from __future__ import annotations

import os
import re
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .interp import Arg, ArgKind
from .manager import BackgroundServer, Client, Manager, ManagerConfig, MsgType, Status
from .manager import protocol as P
from .ptx import parse_module


class ScenarioError(Exception):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


class ExpectationFailed(AssertionError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


@dataclass(frozen=True)
class ClientDecl:
    line: int
    client: str
    partition: int


@dataclass(frozen=True)
class Op:
    line: int
    client: str
    verb: str
    args: tuple
    status: Status = Status.OK
    expect: bytes | None = None  # None: no check ("*" or no clause)


@dataclass
class Scenario:
    items: list[ClientDecl | Op]
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def clients(self) -> list[str]:
        return [i.client for i in self.items if isinstance(i, ClientDecl)]

    def only(self, client: str) -> Scenario:
        """The same script restricted to one client (its solo run)."""
        return Scenario([i for i in self.items if i.client == client], self.base_dir)


_SIZE = re.compile(r"^(0x[0-9a-fA-F]+|\d+)([KMG]i?B?|[KMG])?$")
_UNITS = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}
_REF = re.compile(r"^([A-Za-z_]\w*)(?:([+-])(0x[0-9a-fA-F]+|\d+[KMG]?))?$")
_TYPED = re.compile(r"^(u32|s32|u64|s64|f32|ptr):(.+)$")
_NUMBER = re.compile(r"^[-+]?(0x[0-9a-fA-F]+|\d+)$")
_FLOAT = re.compile(r"^[-+]?(\d+\.\d*|\.\d+)([eE][-+]?\d+)?$")
QUEUED = {"launch", "d2d"}


def _size(tok: str, line: int) -> int:
    m = _SIZE.match(tok)
    if not m:
        raise ScenarioError(line, f"bad size {tok!r}")
    return int(m.group(1), 0) * (_UNITS[m.group(2)[0]] if m.group(2) else 1)


def _int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ScenarioError(line, f"bad integer {tok!r}") from None


def _hex(tokens: list[str], line: int) -> bytes:
    out = bytearray()
    for t in tokens:
        part, _, rep = t.partition("*")
        try:
            chunk = bytes.fromhex(part)
        except ValueError:
            raise ScenarioError(line, f"bad hex {part!r}") from None
        out += chunk * (_int(rep, line) if rep else 1)
    return bytes(out)


def _check_ref(tok: str, known: set[str], line: int) -> None:
    m = _REF.match(tok)
    if not m or m.group(1) not in known:
        raise ScenarioError(line, f"{tok!r} does not name an earlier allocation of this client")


def parse_scenario(text: str, base_dir: str | os.PathLike | None = None) -> Scenario:
    items: list[ClientDecl | Op] = []
    vars_of: dict[str, set[str]] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if toks[0] == "client":
            if len(toks) != 4 or toks[2] != "partition":
                raise ScenarioError(n, "expected `client <id> partition <bytes>`")
            if toks[1] in vars_of:
                raise ScenarioError(n, f"client {toks[1]} declared twice")
            vars_of[toks[1]] = {"base"}
            items.append(ClientDecl(n, toks[1], _size(toks[3], n)))
            continue
        if not toks[0].endswith(":"):
            raise ScenarioError(n, "expected `client ...` or `<id>: <op> ...`")
        cid = toks[0][:-1]
        if cid not in vars_of:
            raise ScenarioError(n, f"client {cid!r} used before its declaration")
        known = vars_of[cid]
        toks = toks[1:]
        if not toks:
            raise ScenarioError(n, "missing operation")
        status = Status.OK
        if len(toks) >= 2 and toks[-2] == "status":
            try:
                status = Status[toks[-1]]
            except KeyError:
                raise ScenarioError(n, f"unknown status {toks[-1]!r}") from None
            toks = toks[:-2]
        verb, rest = toks[0], toks[1:]
        expect = None
        if verb == "malloc":
            if len(rest) != 2:
                raise ScenarioError(n, "expected `malloc <var> <bytes>`")
            if not re.match(r"^[A-Za-z_]\w*$", rest[0]):
                raise ScenarioError(n, f"bad variable name {rest[0]!r}")
            args = (rest[0], _size(rest[1], n))
            if status is Status.OK:
                known.add(rest[0])
        elif verb == "free":
            if len(rest) != 1:
                raise ScenarioError(n, "expected `free <var>`")
            _check_ref(rest[0], known, n)
            args = (rest[0],)
        elif verb == "h2d":
            if len(rest) < 3:
                raise ScenarioError(n, "expected `h2d <var> <offset> <hexbytes>`")
            _check_ref(rest[0], known, n)
            args = (rest[0], _int(rest[1], n), _hex(rest[2:], n))
        elif verb == "d2h":
            if len(rest) < 5 or rest[3] != "expect":
                raise ScenarioError(n, "expected `d2h <var> <offset> <len> expect <hexbytes|*>`")
            _check_ref(rest[0], known, n)
            length = _size(rest[2], n)
            if rest[4:] != ["*"]:
                expect = _hex(rest[4:], n)
                if len(expect) != length:
                    raise ScenarioError(n, f"expectation has {len(expect)} bytes, read has {length}")
            args = (rest[0], _int(rest[1], n), length)
        elif verb == "d2d":
            if len(rest) != 5:
                raise ScenarioError(n, "expected `d2d <dst> <dstoff> <src> <srcoff> <len>`")
            _check_ref(rest[0], known, n)
            _check_ref(rest[2], known, n)
            args = (rest[0], _int(rest[1], n), rest[2], _int(rest[3], n), _size(rest[4], n))
        elif verb == "load":
            if len(rest) != 1:
                raise ScenarioError(n, "expected `load <path.ptx>`")
            args = (rest[0],)
        elif verb == "launch":
            if (len(rest) < 5 or rest[1] != "grid" or rest[3] != "block"
                    or (len(rest) > 5 and rest[5] != "args")):
                raise ScenarioError(n, "expected `launch <kernel> grid <g> block <b> [args ...]`")
            kargs = rest[6:]
            for a in kargs:
                m = _TYPED.match(a)
                if m and m.group(1) == "ptr" and not re.match(r"^[-+]?\d", m.group(2)):
                    _check_ref(m.group(2), known, n)
                elif not m and not _NUMBER.match(a) and not _FLOAT.match(a):
                    _check_ref(a, known, n)
            args = (rest[0], _int(rest[2], n), _int(rest[4], n), tuple(kargs))
        elif verb in ("sync", "disconnect"):
            if rest:
                raise ScenarioError(n, f"`{verb}` takes no arguments")
            args = ()
        else:
            raise ScenarioError(n, f"unknown operation {verb!r}")
        items.append(Op(n, cid, verb, args, status, expect))
    return Scenario(items, Path(base_dir) if base_dir is not None else Path.cwd())


def load_scenario(path: str | os.PathLike) -> Scenario:
    p = Path(path)
    return parse_scenario(p.read_text(), p.parent)


# -- runner -------------------------------------------------------------------


@dataclass
class RunResult:
    failures: list[str] = field(default_factory=list)
    reads: dict[str, list[tuple[int, bytes]]] = field(default_factory=dict)
    dispatch: list = field(default_factory=list)  # manager DispatchRecords (in-process runs)
    apps: dict[str, int] = field(default_factory=dict)  # client id -> app id

    @property
    def ok(self) -> bool:
        return not self.failures


class _ClientRun:
    def __init__(self, cid: str, conn: Client):
        self.cid = cid
        self.conn = conn
        self.vars: dict[str, int] = {}
        self.pending: list[tuple[Op, object]] = []
        self.open = True


class _Runner:
    def __init__(self, sc: Scenario, path: str, result: RunResult):
        self.sc = sc
        self.path = path
        self.r = result
        self.clients: dict[str, _ClientRun] = {}
        self.param_sizes: dict[str, list[tuple[str, int]]] = {}

    def fail(self, line: int, msg: str) -> None:
        self.r.failures.append(f"line {line}: {msg}")

    def addr(self, c: _ClientRun, ref: str, extra: int = 0) -> int:
        m = _REF.match(ref)
        off = 0
        if m.group(2):
            off = _size(m.group(3), 0) * (-1 if m.group(2) == "-" else 1)
        return (c.vars[m.group(1)] + off + extra) & ((1 << 64) - 1)

    def arg(self, c: _ClientRun, tok: str, ptype: tuple[str, int] | None, line: int) -> Arg:
        m = _TYPED.match(tok)
        if m:
            t, v = m.groups()
            if t == "f32":
                return Arg(ArgKind.F32, float(v))
            if t == "ptr":
                return Arg(ArgKind.DEVADDR, _int(v, line) if re.match(r"^[-+]?\d", v)
                           else self.addr(c, v))
            return Arg(ArgKind.SCALAR32 if t[1:] == "32" else ArgKind.SCALAR64, _int(v, line))
        if _NUMBER.match(tok):
            v = _int(tok, line)
            if ptype is not None and ptype[1] == 4:
                return Arg(ArgKind.SCALAR32, v)
            return Arg(ArgKind.SCALAR64, v)
        if _FLOAT.match(tok):
            return Arg(ArgKind.F32, float(tok))
        return Arg(ArgKind.DEVADDR, self.addr(c, tok))

    def run(self) -> None:
        for item in self.sc.items:
            if isinstance(item, ClientDecl):
                self.declare(item)
                continue
            c = self.clients.get(item.client)
            if c is None or not c.open:
                self.fail(item.line, f"client {item.client} is not connected")
                continue
            try:
                self.op(c, item)
            except KeyError as e:
                self.fail(item.line, f"unbound variable {e}")
        for c in self.clients.values():
            if c.open:
                c.conn.send(MsgType.SYNC)
                c.pending.append((Op(0, c.cid, "sync", ()), None))
                self.drain(c)
                c.conn.close()

    def declare(self, d: ClientDecl) -> None:
        conn = Client(self.path)
        c = self.clients[d.client] = _ClientRun(d.client, conn)
        try:
            app, base, _ = conn.init(d.partition)
        except Exception as e:  # noqa: BLE001 - reported as a scenario failure
            self.fail(d.line, f"INIT failed: {e}")
            c.open = False
            return
        c.vars["base"] = base
        self.r.apps[d.client] = app
        self.r.reads.setdefault(d.client, [])

    def op(self, c: _ClientRun, op: Op) -> None:
        v, a = op.verb, op.args
        ctx = None
        if v == "malloc":
            c.conn.send(MsgType.MALLOC, P.encode_u64(a[1]))
            ctx = a[0]
        elif v == "free":
            c.conn.send(MsgType.FREE, P.encode_u64(self.addr(c, a[0])))
        elif v == "h2d":
            c.conn.send(MsgType.MEMCPY_H2D, P.encode_h2d(self.addr(c, a[0], a[1]), a[2]))
        elif v == "d2h":
            c.conn.send(MsgType.MEMCPY_D2H, P.encode_d2h(self.addr(c, a[0], a[1]), a[2]))
        elif v == "d2d":
            c.conn.send(MsgType.MEMCPY_D2D,
                        P.encode_d2d(self.addr(c, a[0], a[1]), self.addr(c, a[2], a[3]), a[4]))
        elif v == "load":
            path = Path(a[0])
            if not path.is_absolute():
                path = self.sc.base_dir / path
            try:
                text = path.read_text()
            except OSError as e:
                self.fail(op.line, f"cannot read {path}: {e}")
                return
            self._learn_params(text)
            c.conn.send(MsgType.LOAD_MODULE, text.encode())
        elif v == "launch":
            name, grid, block, toks = a
            ptypes = self.param_sizes.get(name, [])
            args = tuple(self.arg(c, t, ptypes[i] if i < len(ptypes) else None, op.line)
                         for i, t in enumerate(toks))
            c.conn.send(MsgType.LAUNCH, P.encode_launch(P.LaunchRequest(name, grid, block, args)))
        elif v == "sync":
            c.conn.send(MsgType.SYNC)
        elif v == "disconnect":
            c.conn.close()
            c.open = False
            c.pending.clear()
            return
        c.pending.append((op, ctx))
        if v not in QUEUED:
            self.drain(c)

    def _learn_params(self, text: str) -> None:
        try:
            m = parse_module(text, strict=False)
        except Exception:  # noqa: BLE001 - the manager reports the real error
            return
        for k in m.entries:
            self.param_sizes[k.name] = [(p.type, p.size) for p in k.params]

    def drain(self, c: _ClientRun) -> None:
        while c.pending:
            op, ctx = c.pending.pop(0)
            try:
                status, body = c.conn.recv()
            except (OSError, ConnectionError) as e:
                self.fail(op.line, f"connection lost: {e}")
                c.open = False
                c.pending.clear()
                return
            self.check(c, op, ctx, status, body)

    def check(self, c: _ClientRun, op: Op, ctx, status: Status, body: bytes) -> None:
        where = op.line
        if status is not op.status:
            detail = body.decode(errors="replace") if status is not Status.OK else ""
            self.fail(where, f"{op.verb}: expected {op.status.name}, got {status.name}"
                      + (f" ({detail})" if detail else ""))
            return
        if status is not Status.OK:
            return
        if op.verb == "malloc":
            c.vars[ctx] = P.decode_u64(body)
        elif op.verb == "d2h":
            self.r.reads[c.cid].append((where, body))
            if op.expect is not None and body != op.expect:
                self.fail(where, "d2h mismatch: " + _diff(op.expect, body))


def _diff(want: bytes, got: bytes) -> str:
    first = next((i for i, (x, y) in enumerate(zip(want, got)) if x != y), min(len(want), len(got)))
    lo = first - first % 16
    return (f"first difference at byte {first}; expected {want[lo:lo + 32].hex()} "
            f"got {got[lo:lo + 32].hex()}")


def run_scenario(sc: Scenario, config: ManagerConfig | None = None, *,
                 connect: str | None = None) -> RunResult:
    """Execute ``sc`` against an in-process manager (or ``connect`` to a running one).

    The in-process manager uses lazy dispatch, so the run is deterministic.
    """
    result = RunResult()
    if connect is not None:
        _Runner(sc, connect, result).run()
        return result
    cfg = config or ManagerConfig()
    cfg.lazy_dispatch = True
    tmp = tempfile.mkdtemp(prefix="grd-")
    path = os.path.join(tmp, "manager.sock")
    try:
        with BackgroundServer(Manager(cfg), path) as bs:
            _Runner(sc, path, result).run()
        result.dispatch = list(bs.manager.dispatch_log)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return result
