"""PTX subset: syntax tree, parser and printer."""

from .ast import (
    INSTRUMENTED_SPACES, AddressOperand, BranchTargets, CallArgs, Immediate, Instruction,
    KernelDef, Label, LabelArray, LabelRef, LocalDecl, MemoryOp, ParamDecl, PtxModule,
    RawStatement, RegDecl, Register, SpecialRegister, Symbol, VectorGroup, list_memory_ops,
)
from .emit import emit_kernel, emit_module
from .parser import parse_module

__all__ = [
    "INSTRUMENTED_SPACES", "AddressOperand", "BranchTargets", "CallArgs", "Immediate",
    "Instruction", "KernelDef", "Label", "LabelArray", "LabelRef", "LocalDecl", "MemoryOp",
    "ParamDecl", "PtxModule", "RawStatement", "RegDecl", "Register", "SpecialRegister",
    "Symbol", "VectorGroup", "emit_kernel", "emit_module", "list_memory_ops", "parse_module",
]
