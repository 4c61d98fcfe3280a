"""Exception hierarchy shared by the parser, patcher, allocator and interpreter."""

from __future__ import annotations


class GrdError(Exception):
    """Base class for every error raised by grdsim."""


# -- ptx front end -----------------------------------------------------------


class PtxError(GrdError):
    def __init__(self, line: int | None, reason: str):
        self.line = line
        self.reason = reason
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")


class PtxSyntaxError(PtxError):
    """Text does not match the subset grammar."""


class UnsupportedFeature(PtxError):
    """Valid PTX that lies outside the modeled subset (strict mode)."""

    def __init__(self, line: int | None, feature: str):
        self.feature = feature
        super().__init__(line, f"unsupported feature: {feature}")


class AddressSize32Error(PtxError):
    def __init__(self, line: int | None):
        super().__init__(line, ".address_size 32 is not supported; only 64-bit modules can be sandboxed")


# -- patcher ------------------------------------------------------------------


class NotPowerOfTwo(GrdError, ValueError):
    pass


class AlreadySandboxed(GrdError):
    pass


# -- allocator ----------------------------------------------------------------


class AllocatorError(GrdError):
    pass


class DeviceOom(AllocatorError):
    pass


class DuplicateApp(AllocatorError):
    pass


class UnknownApp(AllocatorError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return Exception.__str__(self)


class PartitionOom(AllocatorError):
    pass


class InvalidSize(AllocatorError, ValueError):
    pass


class UnknownAlloc(AllocatorError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


# -- interpreter --------------------------------------------------------------


class ExecutionError(GrdError):
    pass


class DeviceFault(ExecutionError):
    """Access outside simulated device memory (the analogue of an Xid error)."""

    def __init__(self, addr: int, thread: int | None = None, statement: int | None = None,
                 reason: str = "address outside device memory"):
        self.addr = addr
        self.thread = thread
        self.statement = statement
        super().__init__(f"{reason}: 0x{addr:x} (thread {thread}, statement {statement})")


class MisalignedAccess(DeviceFault):
    def __init__(self, addr: int, width: int, thread: int | None = None, statement: int | None = None):
        self.width = width
        super().__init__(addr, thread, statement, reason=f"misaligned {width}-byte access")


class BranchFault(ExecutionError):
    """Indirect branch index outside its target table."""


class StepLimitExceeded(ExecutionError):
    def __init__(self, thread: int, limit: int):
        self.thread = thread
        self.limit = limit
        super().__init__(f"thread {thread} exceeded the step limit of {limit} instructions")


class TypeFault(ExecutionError):
    """Operand/width mismatch, division by zero, or an unmodeled operation."""


class UnknownKernel(ExecutionError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)
