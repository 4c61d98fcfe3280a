"""Device memory partitioning.

The whole simulated device is reserved up front and split with a buddy
allocator, which makes every partition a power of two in size and aligned
to that size -- the precondition for bitwise fencing.  Inside a partition a
first-fit free list hands out 256-byte aligned buffers.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

from .errors import (
    DeviceOom, DuplicateApp, InvalidSize, PartitionOom, UnknownAlloc, UnknownApp,
)
from .patcher import is_power_of_two

MIN_PARTITION = 4096
ALLOC_ALIGN = 256
DEFAULT_DEVICE_BASE = 0x7FA2C0000000
DEFAULT_DEVICE_SIZE = 256 << 20
ADDRESS_LIMIT = 1 << 64


def next_power_of_two(n: int) -> int:
    return 1 << (n - 1).bit_length() if n > 1 else 1


def _round_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


@dataclass
class PartitionRecord:
    app_id: object
    base: int
    size: int
    free_list: list[tuple[int, int]] = field(default_factory=list)  # (offset, length), sorted
    live_allocs: dict[int, int] = field(default_factory=dict)  # device address -> length

    def __post_init__(self):
        if not self.free_list and not self.live_allocs:
            self.free_list = [(0, self.size)]

    @property
    def mask(self) -> int:
        return self.size - 1

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def malloc(self, size: int) -> int:
        if size < 1:
            raise InvalidSize(f"allocation size must be positive, got {size}")
        need = _round_up(size, ALLOC_ALIGN)
        for i, (off, length) in enumerate(self.free_list):
            if length >= need:
                if length == need:
                    del self.free_list[i]
                else:
                    self.free_list[i] = (off + need, length - need)
                addr = self.base + off
                self.live_allocs[addr] = need
                return addr
        raise PartitionOom(f"partition of app {self.app_id} cannot fit {size} bytes")

    def free(self, addr: int) -> None:
        length = self.live_allocs.pop(addr, None)
        if length is None:
            raise UnknownAlloc(f"0x{addr:x} is not a live allocation of app {self.app_id}")
        off = addr - self.base
        fl = self.free_list
        i = bisect.bisect_left(fl, (off, 0))
        # merge with the following extent, then the preceding one
        if i < len(fl) and fl[i][0] == off + length:
            length += fl[i][1]
            del fl[i]
        if i > 0 and fl[i - 1][0] + fl[i - 1][1] == off:
            off, prev = fl[i - 1]
            length += prev
            i -= 1
            del fl[i]
        fl.insert(i, (off, length))


class PartitionBoundsTable:
    """Per-application partitions of a reserved device address range."""

    def __init__(self, device_base: int = DEFAULT_DEVICE_BASE,
                 device_size: int = DEFAULT_DEVICE_SIZE, min_partition: int = MIN_PARTITION):
        if not is_power_of_two(device_size) or not is_power_of_two(min_partition):
            raise ValueError("device size and minimum partition must be powers of two")
        if device_base % device_size:
            raise ValueError(f"device base 0x{device_base:x} must be aligned to the device size")
        if device_base + device_size > ADDRESS_LIMIT or min_partition > device_size:
            raise ValueError("device range does not fit")
        self.device_base = device_base
        self.device_size = device_size
        self.min_partition = min_partition
        self.records: dict[object, PartitionRecord] = {}
        self._max_order = device_size.bit_length() - 1
        self._min_order = min_partition.bit_length() - 1
        # order -> sorted offsets (relative to device_base) of free blocks
        self.buddy_state: dict[int, list[int]] = {o: [] for o in range(self._min_order, self._max_order + 1)}
        self.buddy_state[self._max_order].append(0)

    # -- partitions -----------------------------------------------------------

    def create_partition(self, app_id, requested_bytes: int) -> PartitionRecord:
        if app_id in self.records:
            raise DuplicateApp(f"app {app_id} already has a partition")
        if requested_bytes < 1:
            raise InvalidSize(f"requested partition size must be positive, got {requested_bytes}")
        size = next_power_of_two(max(requested_bytes, self.min_partition))
        order = size.bit_length() - 1
        if order > self._max_order:
            raise DeviceOom(f"{requested_bytes} bytes exceeds the device size")
        # lowest-addressed free block large enough; this keeps placement equal
        # to "first size-aligned free hole", which is easy to check by brute force
        best = None
        for o in range(order, self._max_order + 1):
            blocks = self.buddy_state[o]
            if blocks and (best is None or blocks[0] < best[0]):
                best = (blocks[0], o)
        if best is None:
            raise DeviceOom(f"no free {size}-byte block for app {app_id}")
        off, o = best
        self.buddy_state[o].pop(0)
        while o > order:
            o -= 1
            bisect.insort(self.buddy_state[o], off + (1 << o))
        rec = PartitionRecord(app_id, self.device_base + off, size)
        self.records[app_id] = rec
        return rec

    def destroy_partition(self, app_id) -> None:
        rec = self.records.pop(app_id, None)
        if rec is None:
            raise UnknownApp(f"unknown app {app_id}")
        off = rec.base - self.device_base
        o = rec.size.bit_length() - 1
        while o < self._max_order:
            buddy = off ^ (1 << o)
            blocks = self.buddy_state[o]
            i = bisect.bisect_left(blocks, buddy)
            if i < len(blocks) and blocks[i] == buddy:
                del blocks[i]
                off = min(off, buddy)
                o += 1
            else:
                break
        bisect.insort(self.buddy_state[o], off)

    def record(self, app_id) -> PartitionRecord:
        try:
            return self.records[app_id]
        except KeyError:
            raise UnknownApp(f"unknown app {app_id}") from None

    def partition_of(self, addr: int) -> PartitionRecord | None:
        for rec in self.records.values():
            if rec.contains(addr):
                return rec
        return None

    # -- buffers --------------------------------------------------------------

    def device_malloc(self, app_id, size: int) -> int:
        return self.record(app_id).malloc(size)

    def device_free(self, app_id, addr: int) -> None:
        self.record(app_id).free(addr)

    def check_range(self, app_id, addr: int, length: int) -> bool:
        """True iff ``[addr, addr+length)`` lies inside the app's partition.

        The sum is checked against 2**64 so a range that would wrap the 64-bit
        address space is rejected rather than silently folded.
        """
        rec = self.record(app_id)
        if addr < 0 or length < 0 or addr >= ADDRESS_LIMIT:
            return False
        stop = addr + length
        if stop > ADDRESS_LIMIT:
            return False
        return rec.base <= addr and stop <= rec.end

    # -- debugging ------------------------------------------------------------

    def check_invariants(self) -> None:
        """Assert alignment, disjointness, tiling and conservation."""
        spans = []
        for rec in self.records.values():
            assert is_power_of_two(rec.size) and rec.size >= self.min_partition
            assert rec.base & rec.mask == 0, f"partition 0x{rec.base:x} not size-aligned"
            assert self.device_base <= rec.base and rec.end <= self.device_base + self.device_size
            spans.append((rec.base, rec.end))
            pieces = sorted([*((rec.base + o, rec.base + o + n) for o, n in rec.free_list),
                             *((a, a + n) for a, n in rec.live_allocs.items())])
            pos = rec.base
            for a, b in pieces:
                assert a == pos and b > a, f"extents of app {rec.app_id} do not tile the partition"
                pos = b
            assert pos == rec.end
            assert all(a % ALLOC_ALIGN == 0 for a in rec.live_allocs)
            assert all(rec.free_list[i][0] + rec.free_list[i][1] < rec.free_list[i + 1][0]
                       for i in range(len(rec.free_list) - 1)), "free list not coalesced"
        for o, blocks in self.buddy_state.items():
            assert blocks == sorted(set(blocks))
            for off in blocks:
                assert off % (1 << o) == 0
                spans.append((self.device_base + off, self.device_base + off + (1 << o)))
        spans.sort()
        pos = self.device_base
        for a, b in spans:
            assert a == pos, "partitions and free blocks overlap or leave a gap"
            pos = b
        assert pos == self.device_base + self.device_size
