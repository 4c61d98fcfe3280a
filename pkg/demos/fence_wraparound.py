"""Run a kernel with a hostile pointer before and after fencing.

The kernel stores each thread id at ``dst + 4*n``.  Given a pointer into
someone else's partition, the original kernel writes there; the fenced kernel
folds the same address back into its own partition.

    python demos/fence_wraparound.py
"""

from pathlib import Path

from grdsim.interp import DevAddr, LaunchConfig, Scalar32, SimMemory, SymbolTable, launch, load_module
from grdsim.patcher import FenceParams, SandboxMode, sandbox_module
from grdsim.ptx import parse_module

SRC = Path(__file__).resolve().parent.parent / "scenarios" / "kernels" / "listing1.ptx"
DEVICE = 0x7FA2C0000000
MINE = FenceParams(SandboxMode.FENCE_BITWISE, DEVICE + (1 << 16), 1 << 16)
VICTIM = DEVICE  # the partition just below ours


def run(module, args):
    table = SymbolTable()
    load_module(module, table)
    mem = SimMemory(DEVICE, 1 << 20)
    trace = launch(table.lookup("kernel"), LaunchConfig(1, 4, tuple(args)), mem)
    return mem, [e for e in trace.protected() if e.kind == "store"]


original = parse_module(SRC.read_text())
fenced, _ = sandbox_module(original, SandboxMode.FENCE_BITWISE)
target = [DevAddr(VICTIM + 0x100), Scalar32(0)]

mem, stores = run(original, target)
print("original kernel")
for e in stores:
    print(f"  thread {e.thread} stored to {e.addr:#x}  (victim partition: {VICTIM <= e.addr < MINE.base})")
print(f"  victim word now {mem.read_int(VICTIM + 0x100, 4)}")

mem, stores = run(fenced, target + MINE.values())
print("fenced kernel")
for e in stores:
    print(f"  thread {e.thread} stored to {e.addr:#x}  (own partition: {MINE.base <= e.addr < MINE.end})")
print(f"  victim word now {mem.read_int(VICTIM + 0x100, 4)}")
