"""Sandbox one kernel three ways and look at what the patcher inserted.

    python demos/patch_walkthrough.py
"""

from pathlib import Path

from grdsim.patcher import SandboxMode, compute_mask, fence_bitwise, fence_modulo, sandbox_module
from grdsim.ptx import emit_module, parse_module

SRC = Path(__file__).resolve().parent.parent / "scenarios" / "kernels" / "listing1.ptx"

module = parse_module(SRC.read_text())
print("original kernel")
print("---------------")
print(emit_module(module))

for mode in SandboxMode:
    out, report = sandbox_module(module, mode)
    k = report.kernels[0]
    print(f"{mode.value}: +{k.instructions_added} instructions, +{k.params_added} params, "
          f"+{k.registers_added} registers")
    print("-" * 60)
    print(emit_module(out))

# The two fences agree whenever the partition size is a power of two and the
# base is aligned to it.  A 16 MiB partition, and an address far outside it:
base, size = 0x7FA2D0000000, 16 << 20
wild = 0x7FA2C0000044
print(f"mask for 16 MiB      : {compute_mask(size):#x}")
print(f"bitwise fence of {wild:#x} -> {fence_bitwise(wild, base, compute_mask(size)):#x}")
print(f"modulo fence of  {wild:#x} -> {fence_modulo(wild, base, size):#x}")
