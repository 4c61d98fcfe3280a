"""Deterministic interpreter for the PTX subset, used as the execution oracle."""

from .machine import (
    AccessTrace, Arg, ArgKind, DevAddr, F32, KernelHandle, LaunchConfig, LoadedModule,
    PairVerdict, Scalar32, Scalar64, SymbolTable, TraceEntry, compile_module, launch,
    load_module, run_pair,
)
from .memory import SimMemory

__all__ = [
    "AccessTrace", "Arg", "ArgKind", "DevAddr", "F32", "KernelHandle", "LaunchConfig",
    "LoadedModule", "PairVerdict", "Scalar32", "Scalar64", "SimMemory", "SymbolTable",
    "TraceEntry", "compile_module", "launch", "load_module", "run_pair",
]
