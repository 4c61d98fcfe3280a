"""Offline kernel sandboxing.

``sandbox_kernel`` appends partition parameters to a kernel and inserts a
short bounds sequence in front of every global, local or generic memory
access (and every ``brx.idx``), so that the kernel can only touch the
partition whose bounds it is launched with.

Register layout of the sandboxed kernel (one new 64-bit bank ``%grdreg``)::

    %grdreg0        scratch address
    %grdreg1..n     loaded partition parameters (base first)
    %grdreg{n+1}    second scratch, inline-reciprocal modulo only
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

from .errors import AlreadySandboxed, GrdError, NotPowerOfTwo, UnsupportedFeature
from .ptx.ast import (
    AddressOperand, CallArgs, Immediate, Instruction, KernelDef, Label, LabelArray, LabelRef,
    ParamDecl, PtxModule, RegDecl, Register, Statement, Symbol, addressing_mode,
    list_memory_ops,
)

U64 = (1 << 64) - 1
GRD_TAG = "_grd_"


class SandboxMode(enum.Enum):
    FENCE_BITWISE = "fence-bitwise"
    FENCE_MODULO = "fence-modulo"
    CHECK = "check"

    @property
    def param_names(self) -> tuple[str, ...]:
        return _PARAM_NAMES[self]

    @classmethod
    def parse(cls, text: str) -> SandboxMode:
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown sandbox mode {text!r}; choose from "
                             + ", ".join(m.value for m in cls)) from None


_PARAM_NAMES = {
    SandboxMode.FENCE_BITWISE: ("base", "mask"),
    SandboxMode.FENCE_MODULO: ("base", "size", "inv"),
    SandboxMode.CHECK: ("base", "end"),
}


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def compute_mask(partition_size: int) -> int:
    """Fence mask of a power-of-two partition: ``partition_size - 1``."""
    if not is_power_of_two(partition_size) or partition_size > 1 << 64:
        raise NotPowerOfTwo(f"partition size {partition_size} is not a power of two")
    return partition_size - 1


def reciprocal(size: int) -> int:
    """64-bit fixed-point reciprocal ``floor(2**64 / size)``, saturated."""
    return min((1 << 64) // size, U64)


@dataclass(frozen=True)
class FenceParams:
    """Launch-time values for the appended parameters, in parameter order."""

    mode: SandboxMode
    base: int
    size: int

    def __post_init__(self):
        if self.size <= 0 or self.base < 0 or self.base + self.size > 1 << 64:
            raise ValueError("partition must be a non-empty range of the 64-bit address space")
        if self.mode is SandboxMode.FENCE_BITWISE and self.base & compute_mask(self.size):
            raise ValueError(f"base 0x{self.base:x} is not aligned to size 0x{self.size:x}")

    @property
    def mask(self) -> int:
        return compute_mask(self.size)

    @property
    def end(self) -> int:
        return self.base + self.size

    def values(self) -> list[int]:
        if self.mode is SandboxMode.FENCE_BITWISE:
            return [self.base, self.mask]
        if self.mode is SandboxMode.FENCE_MODULO:
            return [self.base, self.size, reciprocal(self.size)]
        return [self.base, self.end]


def fence_bitwise(addr: int, base: int, mask: int) -> int:
    return (addr & mask) | base


def fence_modulo(addr: int, base: int, size: int) -> int:
    """Modulo fence exactly as the default ``sub/rem.u64/add`` lowering computes it."""
    return (base + ((addr - base) & U64) % size) & U64


# -- reporting ----------------------------------------------------------------


SKIPPED_SPACES = ("shared", "param", "const")


@dataclass
class KernelReport:
    kernel: str
    kind: str = "entry"
    loads: int = 0
    stores: int = 0
    atomics: int = 0
    indirect_branches: int = 0
    skipped: dict[str, int] = field(default_factory=lambda: dict.fromkeys(SKIPPED_SPACES, 0))
    instructions_added: int = 0
    params_added: int = 0
    registers_added: int = 0
    # (statement index in the original body, addressing mode, instructions inserted)
    accesses: list[tuple[int, str, int]] = field(default_factory=list)

    @property
    def instrumented(self) -> int:
        return self.loads + self.stores + self.atomics

    def as_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "kind": self.kind,
            "loads": self.loads,
            "stores": self.stores,
            "atomics": self.atomics,
            "indirect_branches": self.indirect_branches,
            "skipped": dict(self.skipped),
            "instructions_added": self.instructions_added,
            "params_added": self.params_added,
            "registers_added": self.registers_added,
        }


_TOTAL_FIELDS = ("loads", "stores", "atomics", "indirect_branches", "instructions_added",
                 "params_added", "registers_added")


@dataclass
class InstrumentationReport:
    mode: SandboxMode
    kernels: list[KernelReport] = field(default_factory=list)

    def totals(self) -> dict:
        t: dict = {"kernels": sum(k.kind == "entry" for k in self.kernels),
                   "funcs": sum(k.kind == "func" for k in self.kernels)}
        for f in _TOTAL_FIELDS:
            t[f] = sum(getattr(k, f) for k in self.kernels)
        t["skipped"] = {s: sum(k.skipped[s] for k in self.kernels) for s in SKIPPED_SPACES}
        return t

    def as_dict(self) -> dict:
        return {"mode": self.mode.value,
                "kernels": [k.as_dict() for k in self.kernels],
                "totals": self.totals()}


def instrumentation_report_json(r: InstrumentationReport) -> str:
    return json.dumps(r.as_dict(), indent=2) + "\n"


# -- the pass -----------------------------------------------------------------


def _unique(name: str, taken: set[str]) -> str:
    if name not in taken:
        return name
    i = 1
    while f"{name}_{i}" in taken:
        i += 1
    return f"{name}_{i}"


def _bank_prefix(k: KernelDef, want: str, count: int) -> str:
    regs = set(k.register_types())
    prefixes = {d.prefix for d in k.reg_decls}
    cand = want
    i = 0
    while cand in prefixes or cand in regs or any(f"{cand}{j}" in regs for j in range(count)):
        i += 1
        cand = f"{want}_{i}_"
    return cand


def _ins(opcode: str, mods: str, *ops, pred: Register | None = None) -> Instruction:
    return Instruction(opcode, tuple(m for m in mods.split(".") if m), tuple(ops), pred)


def _imm(v: int) -> Immediate:
    return Immediate.of(v)


class _KernelPatcher:
    def __init__(self, k: KernelDef, mode: SandboxMode, inline_reciprocal: bool,
                 funcs: frozenset[str]):
        self.k = k
        self.mode = mode
        self.inline = inline_reciprocal and mode is SandboxMode.FENCE_MODULO
        self.funcs = funcs
        self.report = KernelReport(k.name, k.kind)
        nparams = len(mode.param_names)
        self.bank_count = nparams + 1 + (1 if self.inline else 0)
        prefix = _bank_prefix(k, "%grdreg", self.bank_count)
        self.bank = RegDecl("b64", prefix, self.bank_count)
        self.scratch = Register(f"{prefix}0")
        self.param_regs = [Register(f"{prefix}{i + 1}") for i in range(nparams)]
        self.scratch2 = Register(f"{prefix}{nparams + 1}") if self.inline else None
        taken_regs = set(k.register_types())
        self.pred = Register(_unique("%grdpred", taken_regs))
        self.idx = Register(_unique("%grdidx", taken_regs))
        self.oob = _unique("GRD_OOB", k.labels())
        self.uses_idx = False
        self.uses_pred = mode is SandboxMode.CHECK
        self.guarded_checks = False

    def run(self) -> KernelDef:
        k = self.k
        if any(GRD_TAG in p.name for p in k.params):
            raise AlreadySandboxed(f"kernel {k.name!r} already carries sandbox parameters")
        taken = {p.name for p in k.params} | {p.name for p in k.returns}
        new_params = []
        for suffix in self.mode.param_names:
            name = _unique(f"{k.name}{GRD_TAG}{suffix}", taken)
            taken.add(name)
            new_params.append(ParamDecl(name, "u64"))
        body: list[Statement] = [
            _ins("ld", "param.u64", r, AddressOperand(Symbol(p.name)))
            for r, p in zip(self.param_regs, new_params)
        ]
        added = len(body)
        for i, s in enumerate(k.body):
            seq = self.rewrite(i, s)
            added += len(seq) - 1
            body.extend(seq)
        if self.guarded_checks:
            # predicated compares may be skipped, so the flag must start false
            body.insert(len(self.param_regs), _ins("mov", "pred", self.pred, _imm(0)))
            added += 1
        if self.mode is SandboxMode.CHECK:
            body.append(Label(self.oob))
            body.append(_ins("ret", ""))
            added += 1
        regs = [*k.reg_decls, self.bank]
        if self.uses_pred:
            regs.append(RegDecl("pred", self.pred.name))
        if self.uses_idx:
            regs.append(RegDecl("b32", self.idx.name))
        r = self.report
        r.instructions_added = added
        r.params_added = len(new_params)
        r.registers_added = self.bank_count + self.uses_pred + self.uses_idx
        return replace(k, params=k.params + tuple(new_params), reg_decls=tuple(regs),
                       body=tuple(body))

    # -- per statement --------------------------------------------------------

    def rewrite(self, index: int, s: Statement) -> list[Statement]:
        if not isinstance(s, Instruction):
            return [s]
        if s.is_memory:
            return self.memory_access(index, s)
        if s.opcode == "brx_idx":
            return self.indirect_branch(s)
        if s.opcode == "call":
            return [self.call_site(s)]
        return [s]

    def memory_access(self, index: int, s: Instruction) -> list[Statement]:
        r = self.report
        space = s.space
        if space in SKIPPED_SPACES:
            r.skipped[space] += 1
            return [s]
        mode = addressing_mode(s)
        if mode == "symbolic":
            raise UnsupportedFeature(s.line, f"symbolic address operand [{s.address.base}]")
        if s.opcode == "ld":
            r.loads += 1
        elif s.opcode == "st":
            r.stores += 1
        else:
            r.atomics += 1

        addr = s.address
        seq: list[Instruction] = []
        src = addr.base
        if src is None:
            seq.append(_ins("mov", "u64", self.scratch, _imm(addr.offset & U64)))
            src = self.scratch
        else:
            if self._is_narrow(src):
                seq.append(_ins("cvt", "u64.u32", self.scratch, src))
                src = self.scratch
            if addr.offset != 0:
                seq.append(_ins("add", "s64", self.scratch, src, _imm(addr.offset)))
                src = self.scratch

        new_addr = AddressOperand(self.scratch)
        if self.mode is SandboxMode.CHECK:
            seq.extend(self.check_sequence(src, s.predicate))
            if src is not self.scratch:
                new_addr = addr
        else:
            seq.extend(self.fence_sequence(src))
        ops = tuple(new_addr if isinstance(o, AddressOperand) else o for o in s.operands)
        access = replace(s, operands=ops, comments=())
        if seq:
            seq[0] = replace(seq[0], comments=s.comments)
        else:
            access = replace(access, comments=s.comments)
        r.accesses.append((index, mode, len(seq)))
        return [*seq, access]

    def _is_narrow(self, reg: Register) -> bool:
        t = self.k.register_types().get(reg.name)
        return t is not None and t[1:] in ("32", "16", "8")

    def fence_sequence(self, src: Register) -> list[Instruction]:
        out = self.scratch
        if self.mode is SandboxMode.FENCE_BITWISE:
            base, mask = self.param_regs
            return [_ins("and", "b64", out, src, mask),
                    _ins("or", "b64", out, out, base)]
        base, size, inv = self.param_regs
        if not self.inline:
            return [_ins("sub", "s64", out, src, base),
                    _ins("rem", "u64", out, out, size),
                    _ins("add", "s64", out, out, base)]
        t = self.scratch2
        # q = mulhi(off, inv) undershoots floor(off/size) by at most one, so a
        # single conditional subtract (unsigned min trick) finishes the job.
        return [_ins("sub", "s64", out, src, base),
                _ins("mul", "hi.u64", t, out, inv),
                _ins("mul", "lo.u64", t, t, size),
                _ins("sub", "s64", out, out, t),
                _ins("sub", "s64", t, out, size),
                _ins("min", "u64", out, out, t),
                _ins("add", "s64", out, out, base)]

    def check_sequence(self, src: Register, pred: Register | None) -> list[Instruction]:
        base, end = self.param_regs
        p = self.pred
        self.guarded_checks |= pred is not None
        # %grdpred is false whenever control reaches a check (a true value
        # leaves the kernel), so guarding the compares with the access's own
        # predicate keeps disabled accesses from tripping the exit.
        return [_ins("setp", "lt.u64", p, src, base, pred=pred),
                _ins("setp", "ge.or.u64", p, src, end, p, pred=pred),
                _ins("bra", "", LabelRef(self.oob), pred=p)]

    def indirect_branch(self, s: Instruction) -> list[Statement]:
        self.report.indirect_branches += 1
        idx, table = s.operands
        n = len(table.labels) if isinstance(table, LabelArray) else 0
        if self.mode is SandboxMode.CHECK:
            self.guarded_checks |= s.predicate is not None
            return [replace(_ins("setp", "ge.u32", self.pred, idx, _imm(n), pred=s.predicate),
                            comments=s.comments),
                    _ins("bra", "", LabelRef(self.oob), pred=self.pred),
                    replace(s, comments=())]
        self.uses_idx = True
        return [replace(_ins("rem", "u32", self.idx, idx, _imm(n)), comments=s.comments),
                replace(s, operands=(self.idx, table), comments=())]

    def call_site(self, s: Instruction) -> Instruction:
        target = next((o.name for o in s.operands if isinstance(o, LabelRef)), None)
        if target not in self.funcs:
            raise UnsupportedFeature(s.line, f"call to function {target!r} not defined in this module")
        ops = list(s.operands)
        for i in range(len(ops) - 1, -1, -1):
            if isinstance(ops[i], CallArgs) and i > 0 and isinstance(ops[i - 1], LabelRef):
                ops[i] = CallArgs(ops[i].items + tuple(self.param_regs))
                break
        else:
            ops.append(CallArgs(tuple(self.param_regs)))
        return replace(s, operands=tuple(ops))


def _sandbox(k: KernelDef, mode: SandboxMode, inline_reciprocal: bool,
             funcs: frozenset[str]) -> tuple[KernelDef, KernelReport]:
    p = _KernelPatcher(k, mode, inline_reciprocal, funcs)
    return p.run(), p.report


def sandbox_kernel(k: KernelDef, mode: SandboxMode, *, inline_reciprocal: bool = False,
                   funcs: frozenset[str] | set[str] = frozenset()) -> KernelDef:
    """Return the sandboxed form of ``k``.

    ``funcs`` names the ``.func`` definitions of the enclosing module; calls to
    them gain the fence registers as trailing arguments.
    """
    return _sandbox(k, mode, inline_reciprocal, frozenset(funcs))[0]


def sandbox_module(m: PtxModule, mode: SandboxMode, *,
                   inline_reciprocal: bool = False) -> tuple[PtxModule, InstrumentationReport]:
    funcs = frozenset(f.name for f in m.funcs)
    report = InstrumentationReport(mode)
    kernels = []
    for k in m.kernels:
        try:
            sk, kr = _sandbox(k, mode, inline_reciprocal, funcs)
        except GrdError as e:
            e.kernel = k.name
            e.args = (f"kernel {k.name}: {e}",)
            raise
        total = len(list_memory_ops(k))
        assert kr.instrumented + sum(kr.skipped.values()) == total
        kernels.append(sk)
        report.kernels.append(kr)
    return replace(m, kernels=tuple(kernels)), report
