import pytest
from hypothesis import given, settings, strategies as st

from grdsim.allocator import PartitionBoundsTable
from grdsim.errors import (
    DeviceOom, DuplicateApp, InvalidSize, UnknownAlloc, UnknownApp,
)

from oracles import in_partition
from workloads import check_range_mismatches, fuzz_partition, fuzz_partitions

BASE = 0x7FA2C0000000


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_buffer_allocator_matches_bitmap(seed):
    fuzz_partition(seed, 300, psize=1 << 14)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_partition_placement_matches_block_map(seed):
    fuzz_partitions(seed, 200)


def test_errors():
    t = PartitionBoundsTable(BASE, 1 << 20)
    t.create_partition(1, 5000)
    assert t.record(1).size == 8192
    with pytest.raises(DuplicateApp):
        t.create_partition(1, 4096)
    with pytest.raises(InvalidSize):
        t.create_partition(2, 0)
    with pytest.raises(DeviceOom):
        t.create_partition(3, 2 << 20)
    with pytest.raises(UnknownApp):
        t.device_malloc(9, 16)
    with pytest.raises(InvalidSize):
        t.device_malloc(1, 0)
    a = t.device_malloc(1, 16)
    t.device_free(1, a)
    with pytest.raises(UnknownAlloc):
        t.device_free(1, a)
    with pytest.raises(UnknownAlloc):
        t.device_free(1, a + 256)


def test_constructor_validation():
    with pytest.raises(ValueError):
        PartitionBoundsTable(BASE, 3 << 20)
    with pytest.raises(ValueError):
        PartitionBoundsTable(BASE + 4096, 1 << 20)


def test_worked_example_partition():
    t = PartitionBoundsTable(BASE, 512 << 20)
    t.create_partition("first", 256 << 20)
    rec = t.create_partition("second", 16 << 20)
    assert rec.base == 0x7FA2D0000000 and rec.mask == 0xFFFFFF
    assert rec.end - 1 == 0x7FA2D0FFFFFF


def test_check_range_boundaries():
    t = PartitionBoundsTable(BASE, 1 << 20)
    t.create_partition("a", 4096)
    t.create_partition("b", 1 << 16)
    assert check_range_mismatches(t, "a") == []
    assert check_range_mismatches(t, "b") == []


@given(st.integers(min_value=BASE - 8192, max_value=BASE + (1 << 17)),
       st.integers(min_value=0, max_value=1 << 17))
def test_check_range_random(addr, n):
    t = PartitionBoundsTable(BASE, 1 << 20)
    t.create_partition("x", 4096)
    rec = t.create_partition("y", 1 << 16)
    assert t.check_range("y", addr, n) == in_partition(rec.base, rec.size, addr, n)
