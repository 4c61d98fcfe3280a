"""Syntax tree for the supported PTX subset.

Every node is an immutable dataclass; rewriting passes build new nodes with
``dataclasses.replace``.  Source line numbers are carried for diagnostics but
excluded from equality so that ``parse(emit(m)) == m`` holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

MEMORY_OPCODES = frozenset({"ld", "st", "atom", "red"})

OPCODES = frozenset({
    "ld", "st", "atom", "red", "mov", "add", "sub", "mul", "mad", "div", "rem",
    "and", "or", "xor", "not", "shl", "shr", "min", "max", "setp", "selp", "cvt",
    "cvta", "bra", "brx_idx", "call", "ret", "bar",
})

STATE_SPACES = ("global", "local", "shared", "param", "const")
INSTRUMENTED_SPACES = frozenset({"global", "local", "generic"})

TYPE_BITS = {
    "pred": 1,
    "b8": 8, "u8": 8, "s8": 8,
    "b16": 16, "u16": 16, "s16": 16,
    "b32": 32, "u32": 32, "s32": 32, "f32": 32,
    "b64": 64, "u64": 64, "s64": 64, "f64": 64,
}

SPECIAL_REGISTERS = ("%tid.x", "%ntid.x", "%ctaid.x", "%nctaid.x")


def is_type(mod: str) -> bool:
    return mod in TYPE_BITS


def type_bytes(t: str) -> int:
    return max(TYPE_BITS[t] // 8, 1)


# -- operands -----------------------------------------------------------------


@dataclass(frozen=True)
class Register:
    name: str
    negated: bool = False  # only meaningful for predicate operands (`!%p`)

    def __str__(self) -> str:
        return ("!" if self.negated else "") + self.name


@dataclass(frozen=True)
class Immediate:
    value: int | float
    text: str

    @classmethod
    def of(cls, value: int) -> Immediate:
        return cls(value, str(value))

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class Symbol:
    """A named entity used as a value or address base (params, .local arrays)."""

    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class AddressOperand:
    base: Register | Symbol | None  # None: absolute address `[offset]`
    offset: int = 0

    def __str__(self) -> str:
        if self.base is None:
            return f"[{self.offset}]"
        if self.offset == 0:
            return f"[{self.base}]"
        sign = "+" if self.offset > 0 else "-"
        return f"[{self.base}{sign}{abs(self.offset)}]"


@dataclass(frozen=True)
class VectorGroup:
    regs: tuple[Register, ...]

    def __str__(self) -> str:
        return "{" + ", ".join(str(r) for r in self.regs) + "}"


@dataclass(frozen=True)
class SpecialRegister:
    name: str  # e.g. "%tid.x"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class LabelRef:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class LabelArray:
    """Target table of a ``brx.idx``; printed by name, resolved to its labels."""

    name: str
    labels: tuple[str, ...]

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class CallArgs:
    """Parenthesised argument (or return) list of a ``call``."""

    items: tuple[Operand, ...]

    def __str__(self) -> str:
        return "(" + ", ".join(str(i) for i in self.items) + ")"


Operand = Union[Register, Immediate, Symbol, AddressOperand, VectorGroup,
                SpecialRegister, LabelRef, LabelArray, CallArgs]


# -- statements ---------------------------------------------------------------


@dataclass(frozen=True)
class Instruction:
    opcode: str
    modifiers: tuple[str, ...] = ()
    operands: tuple[Operand, ...] = ()
    predicate: Register | None = None
    comments: tuple[str, ...] = ()
    line: int | None = field(default=None, compare=False)

    @property
    def mnemonic(self) -> str:
        root = "brx.idx" if self.opcode == "brx_idx" else self.opcode
        return ".".join((root, *self.modifiers))

    @property
    def is_memory(self) -> bool:
        return self.opcode in MEMORY_OPCODES

    @property
    def space(self) -> str:
        for m in self.modifiers:
            if m in STATE_SPACES:
                return m
        return "generic"

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(m for m in self.modifiers if m in TYPE_BITS)

    @property
    def address(self) -> AddressOperand | None:
        for op in self.operands:
            if isinstance(op, AddressOperand):
                return op
        return None

    def __str__(self) -> str:
        pred = f"@{self.predicate} " if self.predicate is not None else ""
        ops = ", ".join(str(o) for o in self.operands)
        return f"{pred}{self.mnemonic}" + (f" {ops}" if ops else "") + ";"


@dataclass(frozen=True)
class Label:
    name: str
    comments: tuple[str, ...] = ()
    line: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class BranchTargets:
    """``name: .branchtargets L0, L1, ...;`` -- the table a ``brx.idx`` indexes."""

    name: str
    labels: tuple[str, ...]
    comments: tuple[str, ...] = ()
    line: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class RawStatement:
    """Verbatim statement kept by the lenient parser (never a memory access)."""

    text: str
    comments: tuple[str, ...] = ()
    line: int | None = field(default=None, compare=False)


Statement = Union[Instruction, Label, BranchTargets, RawStatement]


@dataclass(frozen=True)
class ParamDecl:
    name: str
    type: str
    align: int | None = None
    array: int | None = None
    comments: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return type_bytes(self.type) * (self.array or 1)


@dataclass(frozen=True)
class RegDecl:
    """``.reg .b64 %rd<5>;`` (count=5) or ``.reg .b64 %x;`` (count=None)."""

    type: str
    prefix: str
    count: int | None = None
    comments: tuple[str, ...] = ()

    def names(self) -> list[str]:
        if self.count is None:
            return [self.prefix]
        return [f"{self.prefix}{i}" for i in range(self.count)]


@dataclass(frozen=True)
class LocalDecl:
    """Per-thread ``.local`` array, e.g. ``.local .align 4 .b8 depot[16];``."""

    name: str
    type: str
    align: int | None = None
    array: int | None = None
    comments: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return type_bytes(self.type) * (self.array or 1)


@dataclass(frozen=True)
class KernelDef:
    name: str
    kind: str = "entry"  # "entry" | "func"
    visible: bool = True
    params: tuple[ParamDecl, ...] = ()
    returns: tuple[ParamDecl, ...] = ()
    reg_decls: tuple[RegDecl, ...] = ()
    local_decls: tuple[LocalDecl, ...] = ()
    body: tuple[Statement, ...] = ()
    directives: tuple[str, ...] = ()  # performance tuning lines, e.g. ".maxntid 256, 1, 1"
    comments: tuple[str, ...] = ()
    trailing_comments: tuple[str, ...] = ()
    line: int | None = field(default=None, compare=False)

    def register_types(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for d in self.reg_decls:
            for n in d.names():
                out[n] = d.type
        return out

    def labels(self) -> set[str]:
        return {s.name for s in self.body if isinstance(s, Label)}

    def instructions(self) -> list[Instruction]:
        return [s for s in self.body if isinstance(s, Instruction)]


@dataclass(frozen=True)
class PtxModule:
    version: tuple[int, int] = (7, 7)
    target: str = "sm_86"
    address_size: int = 64
    kernels: tuple[KernelDef, ...] = ()
    passthrough: tuple[str, ...] = ()

    @property
    def entries(self) -> list[KernelDef]:
        return [k for k in self.kernels if k.kind == "entry"]

    @property
    def funcs(self) -> list[KernelDef]:
        return [k for k in self.kernels if k.kind == "func"]

    def kernel(self, name: str) -> KernelDef:
        for k in self.kernels:
            if k.name == name:
                return k
        raise KeyError(name)


# -- queries ------------------------------------------------------------------


class MemoryOp(NamedTuple):
    index: int
    opcode: str
    space: str
    addressing: str  # "direct" | "base+offset" | "symbolic"

    @property
    def instrumentable(self) -> bool:
        return self.space in INSTRUMENTED_SPACES


def addressing_mode(ins: Instruction) -> str:
    addr = ins.address
    if addr is None:  # not a memory instruction
        raise ValueError(f"{ins.mnemonic} has no address operand")
    if isinstance(addr.base, Symbol) and ins.space != "param":
        return "symbolic"
    if addr.base is None or addr.offset != 0:
        return "base+offset"
    return "direct"


def list_memory_ops(k: KernelDef) -> list[MemoryOp]:
    """Every ld/st/atom/red of ``k`` in body order."""
    out = []
    for i, s in enumerate(k.body):
        if isinstance(s, Instruction) and s.is_memory:
            out.append(MemoryOp(i, s.opcode, s.space, addressing_mode(s)))
    return out
