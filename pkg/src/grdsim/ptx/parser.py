"""Recursive-descent parser for the PTX subset documented in docs/ptx-subset.md."""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, replace

from ..errors import AddressSize32Error, PtxSyntaxError, UnsupportedFeature
from .ast import (
    OPCODES, SPECIAL_REGISTERS, TYPE_BITS, AddressOperand, BranchTargets, CallArgs,
    Immediate, Instruction, KernelDef, Label, LabelArray, LabelRef, LocalDecl, Operand,
    ParamDecl, PtxModule, RawStatement, RegDecl, Register, SpecialRegister, Statement,
    Symbol, VectorGroup,
)

log = logging.getLogger(__name__)

# Opcode roots that touch memory but are not modeled; rejected even in lenient
# mode because preserving them verbatim would leave an unfenced access behind.
UNSAFE_UNMODELED = frozenset({
    "ldu", "cp", "suld", "sust", "sured", "tex", "tld4", "txq", "ldmatrix",
    "stmatrix", "wmma", "mbarrier", "multimem", "prefetch", "prefetchu",
    "discard", "applypriority", "cvta_shared",
})

_TOKEN_RE = re.compile(r"""
    (?P<nl>\n)
  | (?P<ws>[ \t\r\f]+)
  | (?P<comment>//[^\n]*)
  | (?P<bcomment>/\*.*?\*/)
  | (?P<num>0[fF][0-9a-fA-F]{8}(?![0-9A-Za-z_])|0[dD][0-9a-fA-F]{16}(?![0-9A-Za-z_])
        |0[xX][0-9a-fA-F]+U?|\d+\.\d*(?:[eE][+-]?\d+)?|\d+U?)
  | (?P<dir>\.[A-Za-z0-9_]+)
  | (?P<id>[A-Za-z_$%][A-Za-z0-9_$]*)
  | (?P<punct>[{}()\[\],;:+\-<>@!|=])
""", re.VERBOSE | re.DOTALL)


@dataclass
class Tok:
    kind: str
    text: str
    line: int
    start: int
    end: int


def tokenize(text: str) -> list[Tok]:
    toks: list[Tok] = []
    line = 1
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise PtxSyntaxError(line, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        s = m.group()
        if kind == "nl":
            line += 1
        elif kind == "bcomment":
            toks.append(Tok("comment", s, line, m.start(), m.end()))
            line += s.count("\n")
        elif kind != "ws":
            toks.append(Tok(kind, s, line, m.start(), m.end()))
        pos = m.end()
    toks.append(Tok("eof", "", line, n, n))
    return toks


def parse_int(text: str) -> int:
    t = text.rstrip("U")
    return int(t, 16) if t[:2] in ("0x", "0X") else int(t, 10)


def parse_number(text: str, line: int) -> Immediate:
    if text[:2] in ("0f", "0F"):
        return Immediate(struct.unpack("<f", struct.pack("<I", int(text[2:], 16)))[0], text)
    if text[:2] in ("0d", "0D"):
        return Immediate(struct.unpack("<d", struct.pack("<Q", int(text[2:], 16)))[0], text)
    if "." in text:
        return Immediate(float(text), text)
    try:
        return Immediate(parse_int(text), text)
    except ValueError:
        raise PtxSyntaxError(line, f"bad number {text!r}") from None


class _Parser:
    def __init__(self, text: str, strict: bool):
        self.src = text
        self.toks = tokenize(text)
        self.i = 0
        self.strict = strict
        self.pending: list[str] = []

    # -- token helpers --------------------------------------------------------

    def peek(self, k: int = 0) -> Tok:
        j = self.i
        seen = 0
        while True:
            t = self.toks[j]
            if t.kind != "comment":
                if seen == k:
                    return t
                seen += 1
            j += 1

    def next(self) -> Tok:
        while True:
            t = self.toks[self.i]
            self.i += 1
            if t.kind == "comment":
                self.pending.append(t.text)
                continue
            return t

    def skip_comments(self) -> None:
        while self.toks[self.i].kind == "comment":
            self.pending.append(self.toks[self.i].text)
            self.i += 1

    def take_comments(self) -> tuple[str, ...]:
        self.skip_comments()
        c = tuple(self.pending)
        self.pending = []
        return c

    def detached_comments(self) -> list[str]:
        """Pending comments not directly above the next token (a blank line apart)."""
        j = self.i
        while self.toks[j].kind == "comment":
            j += 1
        k, line = j, self.toks[j].line
        while k > self.i and self.toks[k - 1].line + self.toks[k - 1].text.count("\n") == line - 1:
            k -= 1
            line = self.toks[k].line
        out = self.pending + [t.text for t in self.toks[self.i:k]]
        self.pending = []
        self.i = k
        return out

    def expect(self, text: str) -> Tok:
        t = self.next()
        if t.text != text:
            raise PtxSyntaxError(t.line, f"expected {text!r}, found {t.text or 'end of input'!r}")
        return t

    def expect_kind(self, kind: str, what: str) -> Tok:
        t = self.next()
        if t.kind != kind:
            raise PtxSyntaxError(t.line, f"expected {what}, found {t.text or 'end of input'!r}")
        return t

    def accept(self, text: str) -> bool:
        if self.peek().text == text:
            self.next()
            return True
        return False

    def unsupported(self, line: int, feature: str) -> None:
        if self.strict:
            raise UnsupportedFeature(line, feature)
        log.warning("line %d: preserving unsupported %s verbatim", line, feature)

    def skip_statement(self) -> tuple[int, int]:
        """Consume tokens through the next ``;`` and return the source span."""
        start = self.peek().start
        depth = 0
        while True:
            t = self.next()
            if t.kind == "eof":
                raise PtxSyntaxError(t.line, "unterminated statement")
            if t.text in "({[" and t.kind == "punct":
                depth += 1
            elif t.text in ")}]" and t.kind == "punct":
                depth -= 1
            elif t.text == ";" and depth <= 0:
                return start, t.end

    def type_mod(self, t: Tok) -> str:
        if t.kind != "dir" or t.text[1:] not in TYPE_BITS:
            raise PtxSyntaxError(t.line, f"expected a type, found {t.text!r}")
        return t.text[1:]

    # -- module ---------------------------------------------------------------

    def module(self) -> PtxModule:
        version = None
        target = None
        address_size = None
        kernels: list[KernelDef] = []
        passthrough: list[str] = []
        names: set[str] = set()
        while True:
            self.skip_comments()
            t = self.peek()
            if t.kind == "eof":
                break
            if t.text == ".version":
                passthrough.extend(self.take_comments())
                self.next()
                v = self.expect_kind("num", "version number")
                major, _, minor = v.text.partition(".")
                if not minor:
                    raise PtxSyntaxError(v.line, f"bad version {v.text!r}")
                version = (int(major), int(minor))
            elif t.text == ".target":
                passthrough.extend(self.take_comments())
                self.next()
                parts = [self.expect_kind("id", "target name").text]
                while self.accept(","):
                    parts.append(self.expect_kind("id", "target name").text)
                target = ", ".join(parts)
            elif t.text == ".address_size":
                passthrough.extend(self.take_comments())
                self.next()
                n = self.expect_kind("num", "address size")
                address_size = parse_int(n.text)
                if address_size == 32:
                    raise AddressSize32Error(n.line)
                if address_size != 64:
                    raise PtxSyntaxError(n.line, f"bad address size {address_size}")
            elif self.starts_kernel():
                passthrough.extend(self.detached_comments())
                k = self.kernel()
                if k is None:
                    continue
                if k.name in names:
                    raise PtxSyntaxError(k.line, f"duplicate kernel name {k.name!r}")
                names.add(k.name)
                kernels.append(k)
            elif t.kind == "dir":
                passthrough.extend(self.take_comments())
                feature = ("module-scope variable" if t.text in (".global", ".const", ".shared", ".local")
                           else f"directive {t.text}")
                self.unsupported(t.line, feature)
                a, b = self.skip_statement()
                passthrough.append(self.src[a:b])
            else:
                raise PtxSyntaxError(t.line, f"unexpected {t.text!r} at module scope")
        passthrough.extend(self.take_comments())
        if version is None or target is None:
            raise PtxSyntaxError(1, "missing .version or .target directive")
        if address_size is None:
            raise PtxSyntaxError(1, "missing .address_size directive (64-bit required)")
        return PtxModule(version, target, address_size, tuple(kernels), tuple(passthrough))

    def starts_kernel(self) -> bool:
        j = 0
        while self.peek(j).text in (".visible", ".weak", ".extern"):
            j += 1
        return self.peek(j).text in (".entry", ".func")

    def kernel(self) -> KernelDef | None:
        comments = self.take_comments()
        first = self.peek()
        linkage: list[str] = []
        while self.peek().text in (".visible", ".weak", ".extern"):
            linkage.append(self.next().text)
        visible = ".visible" in linkage
        if ".extern" in linkage or ".weak" in linkage:
            self.unsupported(first.line, "extern/weak declaration")
            self.skip_statement()
            return None
        kind = self.next().text[1:]
        returns: tuple[ParamDecl, ...] = ()
        if kind == "func" and self.peek().text == "(":
            returns = self.param_list()
        name = self.expect_kind("id", "kernel name")
        params: tuple[ParamDecl, ...] = ()
        if self.peek().text == "(":
            params = self.param_list()
        directives = []
        while self.peek().kind == "dir":
            d = self.next()
            args = [d.text]
            while self.peek().kind == "num":
                args.append(self.next().text)
                if not self.accept(","):
                    break
            directives.append(args[0] + (" " + ", ".join(args[1:]) if len(args) > 1 else ""))
        if self.peek().text == ";":
            self.unsupported(name.line, "function prototype without body")
            self.next()
            return None
        self.expect("{")
        regs, locals_, body, trailing = self.body()
        k = KernelDef(
            name=name.text, kind=kind, visible=visible, params=params, returns=returns,
            reg_decls=tuple(regs), local_decls=tuple(locals_), body=tuple(body),
            directives=tuple(directives), comments=comments, trailing_comments=trailing,
            line=name.line,
        )
        _validate_kernel(k, self.strict)
        return k

    def param_list(self) -> tuple[ParamDecl, ...]:
        self.expect("(")
        out: list[ParamDecl] = []
        if self.accept(")"):
            return ()
        while True:
            comments = self.take_comments()
            self.expect(".param")
            align = None
            if self.accept(".align"):
                align = parse_int(self.expect_kind("num", "alignment").text)
            ty = self.type_mod(self.next())
            name = self.expect_kind("id", "parameter name").text
            array = None
            if self.accept("["):
                array = parse_int(self.expect_kind("num", "array length").text)
                self.expect("]")
            out.append(ParamDecl(name, ty, align, array, comments))
            if self.accept(")"):
                return tuple(out)
            self.expect(",")

    # -- bodies ---------------------------------------------------------------

    def body(self):
        regs: list[RegDecl] = []
        locals_: list[LocalDecl] = []
        body: list[Statement] = []
        while True:
            self.skip_comments()
            t = self.peek()
            if t.kind == "eof":
                raise PtxSyntaxError(t.line, "unterminated kernel body")
            if t.text == "}":
                self.next()
                return regs, locals_, body, self.take_comments()
            if t.text == "{":
                raise UnsupportedFeature(t.line, "nested scope block")
            if t.text == ".reg":
                regs.extend(self.reg_decl())
            elif t.text == ".local":
                locals_.append(self.local_decl())
            elif t.kind == "dir":
                comments = self.take_comments()
                self.unsupported(t.line, f"directive {t.text} in kernel body")
                a, b = self.skip_statement()
                body.append(RawStatement(self.src[a:b], comments, t.line))
            elif t.kind == "id" and self.peek(1).text == ":":
                comments = self.take_comments()
                self.next()
                self.next()
                if self.peek().text == ".branchtargets":
                    self.next()
                    labels = [self.expect_kind("id", "label").text]
                    while self.accept(","):
                        labels.append(self.expect_kind("id", "label").text)
                    self.expect(";")
                    body.append(BranchTargets(t.text, tuple(labels), comments, t.line))
                else:
                    body.append(Label(t.text, comments, t.line))
            else:
                body.append(self.statement())

    def reg_decl(self) -> list[RegDecl]:
        comments = self.take_comments()
        self.expect(".reg")
        ty = self.type_mod(self.next())
        out = []
        while True:
            name = self.expect_kind("id", "register name")
            if not name.text.startswith("%"):
                raise PtxSyntaxError(name.line, f"register names must start with '%': {name.text!r}")
            if self.accept("<"):
                count = parse_int(self.expect_kind("num", "register count").text)
                self.expect(">")
                out.append(RegDecl(ty, name.text, count, comments))
            else:
                out.append(RegDecl(ty, name.text, None, comments))
            comments = ()
            if self.accept(";"):
                return out
            self.expect(",")

    def local_decl(self) -> LocalDecl:
        comments = self.take_comments()
        self.expect(".local")
        align = None
        if self.accept(".align"):
            align = parse_int(self.expect_kind("num", "alignment").text)
        ty = self.type_mod(self.next())
        name = self.expect_kind("id", "local variable name").text
        array = None
        if self.accept("["):
            array = parse_int(self.expect_kind("num", "array length").text)
            self.expect("]")
        self.expect(";")
        return LocalDecl(name, ty, align, array, comments)

    def statement(self) -> Statement:
        comments = self.take_comments()
        start_tok = self.peek()
        start_idx = self.i
        predicate = None
        if self.accept("@"):
            neg = self.accept("!")
            p = self.expect_kind("id", "predicate register")
            predicate = Register(p.text, neg)
        op = self.expect_kind("id", "opcode")
        mods: list[str] = []
        last_end = op.end
        while self.peek().kind == "dir" and self.peek().start == last_end:
            d = self.next()
            mods.append(d.text[1:])
            last_end = d.end
        root = op.text
        if root == "brx" and mods[:1] == ["idx"]:
            root = "brx_idx"
            mods = mods[1:]
        if root not in OPCODES:
            if root in UNSAFE_UNMODELED:
                raise UnsupportedFeature(op.line, f"memory-accessing instruction {root!r}")
            self.unsupported(op.line, f"instruction {root!r}")
            self.i = start_idx
            a, b = self.skip_statement()
            return RawStatement(self.src[a:b], comments, start_tok.line)
        operands: list[Operand] = []
        if self.peek().text != ";":
            pos = 0
            while True:
                operands.append(self.operand(root, pos))
                pos += 1
                if not self.accept(","):
                    break
        self.expect(";")
        ins = Instruction(root, tuple(mods), tuple(operands), predicate, comments, op.line)
        _validate_instruction(ins, self.strict)
        return ins

    def operand(self, opcode: str, pos: int) -> Operand:
        t = self.next()
        if t.text == "[":
            return self.address(t)
        if t.text == "{":
            regs = []
            while True:
                r = self.expect_kind("id", "register")
                regs.append(Register(r.text))
                if self.accept("}"):
                    return VectorGroup(tuple(regs))
                self.expect(",")
        if t.text == "(":
            items: list[Operand] = []
            if self.accept(")"):
                return CallArgs(())
            while True:
                items.append(self.operand("call_arg", 0))
                if self.accept(")"):
                    return CallArgs(tuple(items))
                self.expect(",")
        if t.text == "-":
            n = self.expect_kind("num", "number")
            imm = parse_number(n.text, n.line)
            return Immediate(-imm.value, "-" + imm.text)
        if t.text == "!":
            r = self.expect_kind("id", "predicate register")
            return Register(r.text, True)
        if t.kind == "num":
            return parse_number(t.text, t.line)
        if t.kind == "id":
            if t.text.startswith("%"):
                nxt = self.toks[self.i]
                if nxt.kind == "dir" and nxt.start == t.end:
                    self.i += 1
                    name = t.text + nxt.text
                    if name not in SPECIAL_REGISTERS:
                        raise UnsupportedFeature(t.line, f"special register {name}")
                    return SpecialRegister(name)
                if t.text in ("%tid", "%ntid", "%ctaid", "%nctaid"):
                    raise UnsupportedFeature(t.line, f"vector special register {t.text}")
                return Register(t.text)
            if opcode == "bra" or (opcode == "call" and pos <= 1):
                return LabelRef(t.text)
            if opcode == "brx_idx" and pos == 1:
                return LabelArray(t.text, ())  # resolved against .branchtargets later
            return Symbol(t.text)
        raise PtxSyntaxError(t.line, f"unexpected {t.text or 'end of input'!r} in operand list")

    def address(self, open_tok: Tok) -> AddressOperand:
        t = self.next()
        base: Register | Symbol | None
        offset = 0
        if t.kind == "id":
            base = Register(t.text) if t.text.startswith("%") else Symbol(t.text)
        elif t.kind == "num":
            base = None
            offset = parse_int(t.text)
        else:
            raise PtxSyntaxError(t.line, f"bad address operand near {t.text!r}")
        while self.peek().text in ("+", "-"):
            sign = 1 if self.next().text == "+" else -1
            if self.accept("-"):
                sign = -sign
            n = self.expect_kind("num", "address offset")
            offset += sign * parse_int(n.text)
        self.expect("]")
        if not -(1 << 31) <= offset < (1 << 31) and base is not None:
            raise PtxSyntaxError(open_tok.line, f"address offset {offset} does not fit in 32 bits")
        return AddressOperand(base, offset)


def _validate_instruction(ins: Instruction, strict: bool) -> None:
    if ins.is_memory:
        n_addr = sum(isinstance(o, AddressOperand) for o in ins.operands)
        if n_addr != 1:
            raise PtxSyntaxError(ins.line, f"{ins.mnemonic} needs exactly one address operand")
        addr = ins.address
        if isinstance(addr.base, Symbol) and ins.space != "param" and strict:
            raise UnsupportedFeature(ins.line, f"symbolic address operand [{addr.base}]")
    elif any(isinstance(o, AddressOperand) for o in ins.operands):
        raise PtxSyntaxError(ins.line, f"{ins.mnemonic} cannot take an address operand")
    if ins.opcode == "brx_idx":
        if len(ins.operands) != 2 or not isinstance(ins.operands[1], LabelArray):
            raise PtxSyntaxError(ins.line, "brx.idx expects an index register and a target table")


def _operand_registers(op: Operand):
    if isinstance(op, Register):
        yield op
    elif isinstance(op, AddressOperand) and isinstance(op.base, Register):
        yield op.base
    elif isinstance(op, VectorGroup):
        yield from op.regs
    elif isinstance(op, CallArgs):
        for i in op.items:
            yield from _operand_registers(i)


def _validate_kernel(k: KernelDef, strict: bool) -> KernelDef:
    """Check register coverage and label closure; resolve ``brx.idx`` tables."""
    regs = k.register_types()
    labels = k.labels()
    tables = {s.name: s for s in k.body if isinstance(s, BranchTargets)}
    for s in k.body:
        if isinstance(s, BranchTargets):
            for lab in s.labels:
                if lab not in labels:
                    raise PtxSyntaxError(s.line, f"undefined label {lab!r} in {s.name}")
        if not isinstance(s, Instruction):
            continue
        used = list(_operand_registers_all(s))
        for r in used:
            if r.name not in regs:
                raise PtxSyntaxError(s.line, f"register {r.name} is not declared")
        for op in s.operands:
            if isinstance(op, LabelRef) and s.opcode == "bra" and op.name not in labels:
                raise PtxSyntaxError(s.line, f"undefined label {op.name!r}")
            if isinstance(op, LabelArray) and op.name not in tables:
                raise PtxSyntaxError(s.line, f"undefined branch target table {op.name!r}")
    if any(isinstance(s, Instruction) and s.opcode == "brx_idx" for s in k.body):
        object.__setattr__(k, "body", tuple(_resolve_tables(s, tables) for s in k.body))
    return k


def _operand_registers_all(ins: Instruction):
    if ins.predicate is not None:
        yield ins.predicate
    for op in ins.operands:
        yield from _operand_registers(op)


def _resolve_tables(s: Statement, tables: dict[str, BranchTargets]) -> Statement:
    if not (isinstance(s, Instruction) and s.opcode == "brx_idx"):
        return s
    ops = tuple(LabelArray(o.name, tables[o.name].labels) if isinstance(o, LabelArray) else o
                for o in s.operands)
    return replace(s, operands=ops)


def parse_module(text: str, strict: bool = True) -> PtxModule:
    """Parse PTX source text.

    In strict mode (the default) anything outside the subset raises
    ``UnsupportedFeature``.  Lenient mode keeps unmodeled non-memory statements
    verbatim; memory instructions are always parsed in full.
    """
    return _Parser(text, strict).module()
