"""Canonical PTX printer: one statement per line, one tab inside bodies."""

from __future__ import annotations

from .ast import (
    BranchTargets, Instruction, KernelDef, Label, LocalDecl, ParamDecl, PtxModule,
    RawStatement, RegDecl,
)


def _param(p: ParamDecl) -> str:
    align = f".align {p.align} " if p.align is not None else ""
    array = f"[{p.array}]" if p.array is not None else ""
    return f".param {align}.{p.type} {p.name}{array}"


def _param_block(params: tuple[ParamDecl, ...], lines: list[str], head: str) -> None:
    if not params:
        lines.append(head + "()")
        return
    lines.append(head + "(")
    for i, p in enumerate(params):
        lines.extend("\t" + c for c in p.comments)
        sep = "," if i < len(params) - 1 else ""
        lines.append(f"\t{_param(p)}{sep}")
    lines.append(")")


def _reg(d: RegDecl) -> str:
    count = f"<{d.count}>" if d.count is not None else ""
    return f".reg .{d.type} {d.prefix}{count};"


def _local(d: LocalDecl) -> str:
    align = f".align {d.align} " if d.align is not None else ""
    array = f"[{d.array}]" if d.array is not None else ""
    return f".local {align}.{d.type} {d.name}{array};"


def emit_kernel(k: KernelDef) -> list[str]:
    lines = list(k.comments)
    vis = ".visible " if k.visible else ""
    head = f"{vis}.{k.kind} "
    if k.returns:
        rets = ", ".join(_param(p) for p in k.returns)
        head += f"({rets}) "
    _param_block(k.params, lines, head + k.name)
    lines.extend(k.directives)
    lines.append("{")
    for d in k.reg_decls:
        lines.extend("\t" + c for c in d.comments)
        lines.append("\t" + _reg(d))
    for d in k.local_decls:
        lines.extend("\t" + c for c in d.comments)
        lines.append("\t" + _local(d))
    for s in k.body:
        lines.extend("\t" + c for c in s.comments)
        if isinstance(s, Label):
            lines.append(f"{s.name}:")
        elif isinstance(s, BranchTargets):
            lines.append(f"{s.name}: .branchtargets {', '.join(s.labels)};")
        elif isinstance(s, RawStatement):
            lines.append("\t" + " ".join(s.text.split()))
        elif isinstance(s, Instruction):
            lines.append("\t" + str(s))
    lines.extend("\t" + c for c in k.trailing_comments)
    lines.append("}")
    return lines


def emit_module(m: PtxModule) -> str:
    """Print ``m``; the output parses back to an equal module."""
    major, minor = m.version
    lines = [f".version {major}.{minor}", f".target {m.target}", f".address_size {m.address_size}"]
    if m.passthrough:
        lines.append("")
        lines.extend(" ".join(p.split()) if not p.startswith(("//", "/*")) else p
                     for p in m.passthrough)
    for k in m.kernels:
        lines.append("")
        lines.extend(emit_kernel(k))
    return "\n".join(lines) + "\n"
