"""Partition placement and per-partition malloc on a small device."""

from grdsim.allocator import PartitionBoundsTable

DEVICE_BASE, DEVICE_SIZE = 0x7FA2C0000000, 1 << 24

table = PartitionBoundsTable(DEVICE_BASE, DEVICE_SIZE)
for app, request in [("a", 3 << 20), ("b", 1 << 20), ("c", 5000), ("d", 4 << 20)]:
    rec = table.create_partition(app, request)
    print(f"{app}: asked {request:>8} -> {rec.size:>8} bytes at +{rec.base - DEVICE_BASE:#09x}  "
          f"mask {rec.mask:#x}")

# freeing b leaves a hole that the next request of that size reuses
table.destroy_partition("b")
rec = table.create_partition("e", 1 << 20)
print(f"e: reuses b's block at +{rec.base - DEVICE_BASE:#09x}")

# inside a partition, buffers are first fit in 256-byte units
c = table.record("c")
ptrs = [table.device_malloc("c", n) for n in (100, 300, 256)]
print("c buffers:", ", ".join(f"+{p - c.base:#x}" for p in ptrs))
table.device_free("c", ptrs[1])
print(f"c after freeing the 300-byte buffer, malloc(512) -> +{table.device_malloc('c', 512) - c.base:#x}")

# transfers are validated against the caller's own partition
print("c may copy its last byte:", table.check_range("c", c.end - 1, 1))
print("c may copy one byte past:", table.check_range("c", c.end - 1, 2))
table.check_invariants()
