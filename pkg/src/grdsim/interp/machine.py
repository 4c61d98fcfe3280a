"""Kernel loading, launching and the original-vs-sandboxed comparison harness."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

from ..errors import ExecutionError, StepLimitExceeded, TypeFault, UnknownKernel
from ..patcher import FenceParams
from ..ptx.ast import INSTRUMENTED_SPACES, KernelDef, PtxModule, type_bytes
from .memory import SimMemory
from .semantics import CALL, SHARED_BYTES, Program, compile_kernel, f32_to_bits, f64_to_bits

log = logging.getLogger(__name__)

MAX_THREADS = 1 << 20
DEFAULT_STEP_LIMIT = 10**6
LOCAL_SLICE = 4096


class ArgKind(enum.Enum):
    SCALAR64 = 0
    SCALAR32 = 1
    F32 = 2
    DEVADDR = 3

    @property
    def width(self) -> int:
        return 4 if self in (ArgKind.SCALAR32, ArgKind.F32) else 8


@dataclass(frozen=True)
class Arg:
    kind: ArgKind
    value: int | float


def DevAddr(v: int) -> Arg:
    return Arg(ArgKind.DEVADDR, v)


def Scalar64(v: int) -> Arg:
    return Arg(ArgKind.SCALAR64, v)


def Scalar32(v: int) -> Arg:
    return Arg(ArgKind.SCALAR32, v)


def F32(v: float) -> Arg:
    return Arg(ArgKind.F32, v)


@dataclass(frozen=True)
class LaunchConfig:
    grid_dim_x: int
    block_dim_x: int
    args: tuple = ()
    local_top: int | None = None  # top of the per-thread .local slices; defaults to the device end

    def with_args(self, args: Sequence) -> LaunchConfig:
        return replace(self, args=tuple(args))

    @property
    def threads(self) -> int:
        return self.grid_dim_x * self.block_dim_x


class TraceEntry(NamedTuple):
    thread: int
    func: str
    index: int  # statement index within ``func``'s body
    kind: str  # load | store | atomic
    space: str
    addr: int
    width: int


@dataclass
class AccessTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    oob_exits: int = 0
    steps: int = 0

    def protected(self) -> list[TraceEntry]:
        """Entries in the global, local and generic spaces."""
        return [e for e in self.entries if e.space in INSTRUMENTED_SPACES]

    def escapes(self, lo: int, hi: int) -> list[TraceEntry]:
        return [e for e in self.protected() if e.addr < lo or e.addr + e.width > hi]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccessTrace):
            return NotImplemented
        return (self.entries, self.oob_exits, self.steps) == (other.entries, other.oob_exits, other.steps)


class _Run:
    __slots__ = ("mem", "trace", "programs", "oob_exits")

    def __init__(self, mem, programs):
        self.mem = mem
        self.trace: list = []
        self.programs = programs
        self.oob_exits = 0


class _Thread:
    __slots__ = ("run", "prog", "regs", "pbuf", "stack", "tid", "ntid", "ctaid", "nctaid",
                 "linear", "local_base", "shared")


@dataclass
class LoadedModule:
    module: PtxModule
    programs: dict[str, Program]
    local_offsets: dict[str, int]
    local_bytes: int


@dataclass
class KernelHandle:
    name: str
    kernel: KernelDef
    loaded: LoadedModule

    @property
    def program(self) -> Program:
        return self.loaded.programs[self.name]

    @property
    def arity(self) -> int:
        return len(self.kernel.params)


class SymbolTable:
    """Kernel name to executable handle."""

    def __init__(self):
        self._handles: dict[str, KernelHandle] = {}

    def register(self, h: KernelHandle) -> None:
        if h.name in self._handles:
            log.warning("kernel %s replaced by a newer load", h.name)
        self._handles[h.name] = h

    def lookup(self, name: str) -> KernelHandle:
        try:
            return self._handles[name]
        except KeyError:
            raise UnknownKernel(f"unknown kernel {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._handles

    def names(self) -> list[str]:
        return sorted(self._handles)


def compile_module(m: PtxModule) -> LoadedModule:
    # All .local arrays of the module share one per-thread frame, each at a
    # fixed offset, so a .func called from an entry never aliases its caller.
    offsets: dict[str, int] = {}
    per_kernel: dict[str, dict[str, int]] = {}
    pos = 0
    for k in m.kernels:
        own = {}
        for d in k.local_decls:
            align = d.align or type_bytes(d.type)
            pos = (pos + align - 1) // align * align
            own[d.name] = pos
            offsets[f"{k.name}:{d.name}"] = pos
            pos += d.size
        per_kernel[k.name] = own
    if pos > LOCAL_SLICE:
        raise TypeFault(f"module needs {pos} bytes of .local per thread; the limit is {LOCAL_SLICE}")
    programs = {k.name: compile_kernel(k, per_kernel[k.name]) for k in m.kernels}
    return LoadedModule(m, programs, offsets, pos)


def load_module(m: PtxModule, symtab: SymbolTable) -> LoadedModule:
    """Compile every kernel of ``m`` and register its entries and funcs in ``symtab``."""
    loaded = compile_module(m)
    for k in m.kernels:
        symtab.register(KernelHandle(k.name, k, loaded))
    return loaded


def _encode_params(k: KernelDef, prog: Program, args: Sequence) -> bytearray:
    if len(args) != len(k.params):
        raise TypeFault(f"{k.name} takes {len(k.params)} arguments, got {len(args)}")
    buf = bytearray(prog.param_size)
    for p, a in zip(k.params, args):
        off, size = prog.param_layout[p.name]
        if isinstance(a, Arg):
            if a.kind.width != size:
                raise TypeFault(f"argument for {p.name} is {a.kind.width} bytes, parameter is {size}")
            a = a.value
        if isinstance(a, float):
            if p.type == "f32":
                bits = f32_to_bits(a)
            elif p.type == "f64":
                bits = f64_to_bits(a)
            else:
                raise TypeFault(f"float argument for integer parameter {p.name}")
        elif isinstance(a, int):
            if not -(1 << (8 * size - 1)) <= a < 1 << (8 * size):
                raise TypeFault(f"argument {a} does not fit the {size}-byte parameter {p.name}")
            bits = a & ((1 << (8 * size)) - 1)
        else:
            raise TypeFault(f"unsupported argument {a!r} for {p.name}")
        buf[off:off + size] = bits.to_bytes(size, "little")
    return buf


def launch(handle: KernelHandle, cfg: LaunchConfig, mem: SimMemory,
           step_limit: int = DEFAULT_STEP_LIMIT) -> AccessTrace:
    """Run every thread of the grid in linear-id order and return the access trace.

    Execution errors carry the partial trace in ``err.trace``.
    """
    if handle.kernel.kind != "entry":
        raise TypeFault(f"{handle.name} is a .func and cannot be launched")
    if cfg.grid_dim_x < 1 or cfg.block_dim_x < 1:
        raise TypeFault("grid and block dimensions must be positive")
    if cfg.threads > MAX_THREADS:
        raise TypeFault(f"{cfg.threads} threads exceeds the limit of {MAX_THREADS}")
    entry = handle.program
    params = _encode_params(handle.kernel, entry, cfg.args)
    run = _Run(mem, handle.loaded.programs)
    local_top = mem.end if cfg.local_top is None else cfg.local_top
    steps = 0
    th = None
    try:
        for cta in range(cfg.grid_dim_x):
            shared = bytearray(SHARED_BYTES)
            for tx in range(cfg.block_dim_x):
                th = _Thread()
                th.run = run
                th.prog = entry
                th.regs = entry.reg_init.copy()
                th.pbuf = bytearray(params)
                th.stack = []
                th.tid, th.ntid, th.ctaid, th.nctaid = tx, cfg.block_dim_x, cta, cfg.grid_dim_x
                th.linear = cta * cfg.block_dim_x + tx
                th.local_base = local_top - (th.linear + 1) * LOCAL_SLICE
                th.shared = shared
                steps += _run_thread(th, step_limit)
    except ExecutionError as e:
        e.trace = AccessTrace([TraceEntry(*t) for t in run.trace], run.oob_exits, steps)
        e.kernel = handle.name
        if th is not None and getattr(e, "thread", None) is None:
            e.thread = th.linear
        raise
    return AccessTrace([TraceEntry(*t) for t in run.trace], run.oob_exits, steps)


def _run_thread(th: _Thread, limit: int) -> int:
    ops = th.prog.ops
    pc = 0
    steps = 0
    while True:
        steps += 1
        if steps > limit:
            raise StepLimitExceeded(th.linear, limit)
        pc = ops[pc](th)
        if pc >= 0:
            continue
        if pc == CALL:
            ops = th.prog.ops
            pc = 0
            continue
        if not th.stack:
            return steps
        callee_buf = th.pbuf
        prog, nxt, regs, pbuf, outs = th.stack.pop()
        for name, m, off, size in outs:
            regs[name] = int.from_bytes(callee_buf[off:off + size], "little") & m
        th.prog, th.regs, th.pbuf = prog, regs, pbuf
        ops = prog.ops
        pc = nxt


# -- oracle harness -----------------------------------------------------------


@dataclass
class PairVerdict:
    original_in_bounds: bool
    memories_identical: bool
    outside_untouched: bool
    contained: bool
    oob_exits: int
    original_trace: AccessTrace | None
    sandboxed_trace: AccessTrace | None
    original_error: ExecutionError | None = None
    sandboxed_error: ExecutionError | None = None
    original_memory: SimMemory | None = None
    sandboxed_memory: SimMemory | None = None


def run_pair(original: KernelHandle, sandboxed: KernelHandle, cfg: LaunchConfig,
             mem: SimMemory, fence: FenceParams, step_limit: int = DEFAULT_STEP_LIMIT) -> PairVerdict:
    """Run both kernels from copies of ``mem`` and compare what they did.

    ``cfg.args`` are the user arguments; the fence values are appended for the
    sandboxed launch.  Local slices sit at the partition top unless
    ``cfg.local_top`` says otherwise.
    """
    lo, hi = fence.base, fence.end
    if cfg.local_top is None:
        cfg = replace(cfg, local_top=hi)
    mo, ms = mem.copy(), mem.copy()
    to = ts = None
    eo = es = None
    try:
        to = launch(original, cfg, mo, step_limit)
    except ExecutionError as e:
        eo, to = e, getattr(e, "trace", None)
    try:
        ts = launch(sandboxed, cfg.with_args((*cfg.args, *fence.values())), ms, step_limit)
    except ExecutionError as e:
        es, ts = e, getattr(e, "trace", None)
    in_bounds = eo is None and not to.escapes(lo, hi)
    contained = ts is not None and not ts.escapes(lo, hi) and not _is_fault(es)
    return PairVerdict(
        original_in_bounds=in_bounds,
        memories_identical=eo is None and es is None and mo == ms,
        outside_untouched=ms.equal_outside(mem, lo, hi),
        contained=contained,
        oob_exits=ts.oob_exits if ts is not None else 0,
        original_trace=to,
        sandboxed_trace=ts,
        original_error=eo,
        sandboxed_error=es,
        original_memory=mo,
        sandboxed_memory=ms,
    )


def _is_fault(e) -> bool:
    from ..errors import DeviceFault
    return isinstance(e, DeviceFault)
