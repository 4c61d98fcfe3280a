"""Workload generators shared by the unit and acceptance tests."""

import random
from pathlib import Path

import pytest

from grdsim.allocator import ALLOC_ALIGN, PartitionBoundsTable, next_power_of_two
from grdsim.errors import DeviceOom, PartitionOom
from grdsim.interp import DevAddr, Scalar32
from grdsim.manager import Manager, ManagerConfig, MsgType, Status
from grdsim.manager import protocol as P

from oracles import BitmapAllocator, BlockMapOracle, in_partition

KERNELS = Path(__file__).parent.parent / "scenarios" / "kernels"
FILL = (KERNELS / "fill.ptx").read_text()
BASE = 0x7FA2C0000000


class Local:
    """A client wired straight into a Manager, no sockets."""

    def __init__(self, m: Manager):
        self.m = m
        self.cid = m.connect()
        self.reader = P.FrameReader()
        self.inbox: list[tuple[Status, bytes]] = []

    def send(self, kind, payload=b""):
        self.m.receive(self.cid, int(kind), payload)

    def collect(self):
        for chunk in self.m.take_output(self.cid):
            self.inbox.extend((Status(k), p) for k, p in self.reader.feed(chunk))
        return self.inbox

    def call(self, kind, payload=b""):
        self.send(kind, payload)
        self.m.pump()
        self.collect()
        return self.inbox.pop()

    def init(self, n):
        status, body = self.call(MsgType.INIT, P.encode_u64(n))
        assert status is Status.OK, body
        self.app, self.base, self.size = P.decode_init_ok(body)
        return self

    def malloc(self, n):
        status, body = self.call(MsgType.MALLOC, P.encode_u64(n))
        assert status is Status.OK, body
        return P.decode_u64(body)

    def launch_payload(self, name, grid, block, *args):
        return P.encode_launch(P.LaunchRequest(name, grid, block, tuple(args)))


def manager(**kw):
    return Manager(ManagerConfig(**kw))


def random_script(seed: int, eager: bool = True):
    """Random interleaving of launches, copies and drains over 2-5 clients."""
    rng = random.Random(seed)
    m = manager(lazy_dispatch=not eager)
    clients = [Local(m).init(1 << 14) for _ in range(rng.randint(2, 5))]
    clients[0].call(MsgType.LOAD_MODULE, FILL.encode())
    bufs = {c.cid: c.malloc(1024) for c in clients}
    sent = {c.cid: 0 for c in clients}
    for _ in range(rng.randint(5, 40)):
        c = rng.choice(clients)
        r = rng.random()
        buf = bufs[c.cid]
        if r < 0.55:
            c.send(MsgType.LAUNCH, c.launch_payload("fill", 1, rng.randint(1, 4), DevAddr(buf),
                                                    Scalar32(rng.randrange(100))))
        elif r < 0.75:
            c.send(MsgType.MEMCPY_D2D, P.encode_d2d(buf + 512, buf, 64))
        elif r < 0.9:
            c.send(MsgType.SYNC)
        else:
            c.send(MsgType.MEMCPY_D2H, P.encode_d2h(buf, 16))
        sent[c.cid] += 1
        if rng.random() < 0.3:
            m.pump(dispatch_limit=rng.randint(0, 2))
    for c in clients:
        c.send(MsgType.SYNC)
        sent[c.cid] += 1
    m.pump()
    return m, clients, sent


def fuzz_partition(seed: int, ops: int, psize: int = 1 << 16) -> None:
    """Random malloc/free against the bitmap oracle, comparing every state."""
    rng = random.Random(seed)
    t = PartitionBoundsTable(BASE, 1 << 20)
    rec = t.create_partition("app", psize)
    oracle = BitmapAllocator(rec.base, rec.size)
    live: list[int] = []
    for step in range(ops):
        if live and rng.random() < 0.45:
            addr = live.pop(rng.randrange(len(live)))
            t.device_free("app", addr)
            assert oracle.free(addr)
        else:
            n = rng.choice([1, 255, 256, 257, rng.randrange(1, 4096), rng.randrange(1, psize // 4)])
            want = oracle.malloc(n)
            if want is None:
                with pytest.raises(PartitionOom):
                    t.device_malloc("app", n)
            else:
                got = t.device_malloc("app", n)
                assert got == want, f"step {step}: malloc({n}) gave 0x{got:x}, oracle 0x{want:x}"
                assert got % ALLOC_ALIGN == 0 and rec.contains(got)
                live.append(got)
        assert rec.free_list == oracle.free_extents(), f"step {step}"
        assert rec.live_allocs == {a: n * 256 for a, n in oracle.live.items()}
        t.check_invariants()


def fuzz_partitions(seed: int, ops: int) -> None:
    rng = random.Random(seed)
    t = PartitionBoundsTable(BASE, 1 << 22, min_partition=4096)
    oracle = BlockMapOracle(BASE, 1 << 22, 4096)
    live = []
    next_app = 0
    for _ in range(ops):
        if live and rng.random() < 0.45:
            app = live.pop(rng.randrange(len(live)))
            t.destroy_partition(app)
            oracle.destroy(app)
        else:
            n = rng.choice([1, 4096, 4097, rng.randrange(1, 1 << 18), rng.randrange(1, 1 << 22)])
            want = oracle.create(next_app, n)
            if want is None:
                with pytest.raises(DeviceOom):
                    t.create_partition(next_app, n)
            else:
                rec = t.create_partition(next_app, n)
                assert rec.base == want
                assert rec.size == max(4096, next_power_of_two(n))
                assert rec.base & rec.mask == 0
                live.append(next_app)
            next_app += 1
        t.check_invariants()


def boundary_cases(base: int, size: int):
    edges = [base, base + size]
    for e in edges:
        for a in range(e - 2, e + 3):
            for n in (0, 1, 2, size - 1, size, size + 1):
                yield a, n
    yield (1 << 64) - 1, 1
    yield (1 << 64) - 1, 2
    yield (1 << 64) - 16, 32
    yield base, (1 << 64) - base + 1
    yield base + 8, (1 << 64) - 4


def check_range_mismatches(t, app) -> list:
    rec = t.record(app)
    return [(a, n) for a, n in boundary_cases(rec.base, rec.size)
            if t.check_range(app, a, n) != in_partition(rec.base, rec.size, a, n)]
