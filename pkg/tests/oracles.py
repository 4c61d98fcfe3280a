"""Independent reference implementations the tests compare against."""

from __future__ import annotations

from grdsim.interp import KernelHandle, compile_module, run_pair
from grdsim.patcher import sandbox_module

UNIT = 256  # buffer granularity inside a partition


def handle(module, name):
    loaded = compile_module(module)
    return KernelHandle(name, module.kernel(name), loaded)


def run_case(case, mode, inline_reciprocal=False):
    """Run a generated case unsandboxed and sandboxed in ``mode``; return the verdict."""
    patched, _ = sandbox_module(case.module, mode, inline_reciprocal=inline_reciprocal)
    return run_pair(handle(case.module, case.kernel), handle(patched, case.kernel),
                    case.cfg, case.memory, case.fence(mode))


class BitmapAllocator:
    """First fit over a bitmap of 256-byte units: the slow, obvious allocator."""

    def __init__(self, base: int, size: int):
        self.base = base
        self.used = [False] * (size // UNIT)
        self.live: dict[int, int] = {}

    def malloc(self, n: int) -> int | None:
        need = -(-n // UNIT)
        run = 0
        for i, u in enumerate(self.used):
            run = 0 if u else run + 1
            if run == need:
                start = i - need + 1
                for j in range(start, i + 1):
                    self.used[j] = True
                addr = self.base + start * UNIT
                self.live[addr] = need
                return addr
        return None

    def free(self, addr: int) -> bool:
        need = self.live.pop(addr, None)
        if need is None:
            return False
        start = (addr - self.base) // UNIT
        for j in range(start, start + need):
            self.used[j] = False
        return True

    def free_extents(self) -> list[tuple[int, int]]:
        """(offset, length) runs of free units, in bytes."""
        out, start = [], None
        for i, u in enumerate([*self.used, True]):
            if not u and start is None:
                start = i
            elif u and start is not None:
                out.append((start * UNIT, (i - start) * UNIT))
                start = None
        return out


class BlockMapOracle:
    """Partition placement: the lowest size-aligned run of free minimum blocks."""

    def __init__(self, device_base: int, device_size: int, min_block: int):
        self.base = device_base
        self.min = min_block
        self.used = [False] * (device_size // min_block)
        self.owner: dict[object, tuple[int, int]] = {}

    def create(self, app, n: int) -> int | None:
        size = self.min
        while size < n:
            size *= 2
        blocks = size // self.min
        if blocks > len(self.used):
            return None
        for start in range(0, len(self.used), blocks):
            if not any(self.used[start:start + blocks]):
                for j in range(start, start + blocks):
                    self.used[j] = True
                self.owner[app] = (start, blocks)
                return self.base + start * self.min
        return None

    def destroy(self, app) -> None:
        start, blocks = self.owner.pop(app)
        for j in range(start, start + blocks):
            self.used[j] = False


def in_partition(base: int, size: int, addr: int, length: int) -> bool:
    """Byte-by-byte membership: every byte of the range is a partition byte."""
    if length == 0:
        return base <= addr <= base + size and 0 <= addr < 1 << 64
    lo, hi = addr, addr + length - 1
    if lo < 0 or hi >= 1 << 64:
        return False
    return base <= lo and hi < base + size


def round_robin_violations(log, init_order) -> list[str]:
    """Check a dispatch log against FIFO and round-robin.

    ``init_order`` lists app ids in INIT order.  Each record's ``waiting`` set
    names the clients with queued work when it was picked; round-robin means
    the pick is the first waiting client after the previous pick.
    """
    problems = []
    last_seq: dict[int, int] = {}
    prev = None
    for r in log:
        if r.app_id not in r.waiting:
            problems.append(f"dispatch {r.index}: app {r.app_id} ran without queued work")
        if r.seq <= last_seq.get(r.app_id, -1):
            problems.append(f"dispatch {r.index}: app {r.app_id} seq {r.seq} out of FIFO order")
        last_seq[r.app_id] = r.seq
        ring = list(init_order)
        start = (ring.index(prev) + 1) % len(ring) if prev is not None else 0
        expect = next((a for a in ring[start:] + ring[:start] if a in r.waiting), None)
        if expect != r.app_id:
            problems.append(f"dispatch {r.index}: picked app {r.app_id}, round-robin wants {expect}")
        prev = r.app_id
    return problems
