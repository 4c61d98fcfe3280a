"""Random PTX kernel generator for property tests and the acceptance oracle.

Every case is one module (an entry kernel plus optional ``.func`` helpers)
together with a launch configuration, an initial memory image and the
partition it is meant to stay inside.  In-bounds cases keep every global and
local access inside the partition by construction; adversarial cases inject
at least one access that thread 0 executes unconditionally outside it.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .interp import DevAddr, F32, LaunchConfig, Scalar32, SimMemory
from .patcher import FenceParams, SandboxMode
from .ptx import PtxModule, parse_module

DEVICE_BASE = 0x7FA2C0000000
DEVICE_SIZE = 1 << 20
PART_SIZE = 1 << 16
PART_INDEX = 5
PART_BASE = DEVICE_BASE + PART_INDEX * PART_SIZE
SLOT = 16  # bytes addressed by one index value

HEADER = ".version 7.7\n.target sm_86\n.address_size 64\n"

ATTACKS = ("foreign-pointer", "displaced-pointer", "large-offset", "negative-offset",
           "absolute", "local-overflow", "atomic", "strided")


@dataclass
class GenCase:
    seed: int
    adversarial: bool
    text: str
    module: PtxModule
    kernel: str
    cfg: LaunchConfig
    memory: SimMemory
    base: int = PART_BASE
    size: int = PART_SIZE
    attacks: list[str] = field(default_factory=list)

    def fence(self, mode: SandboxMode) -> FenceParams:
        return FenceParams(mode, self.base, self.size)


class _Body:
    def __init__(self, rng: random.Random, name: str):
        self.rng = rng
        self.name = name
        self.lines: list[str] = []
        self.labels = 0

    def emit(self, text: str) -> None:
        self.lines.append(text)

    def label(self, stem: str) -> str:
        self.labels += 1
        return f"{self.name}_{stem}{self.labels}"


class _KernelGen:
    """Builds the entry kernel text.

    Register conventions: %r0 n, %r1 seed, %r5 global thread id, %r6-%r13 data,
    %r14-%r17 scratch; %rd0 generic buffer, %rd1 global buffer, %rd2-%rd9
    addresses, %rd10 offsets, %rd11 local frame, %rd12-%rd15 64-bit data.
    """

    DATA = [f"%r{i}" for i in range(6, 14)]
    DATA64 = [f"%rd{i}" for i in range(12, 16)]
    ADDR = [f"%rd{i}" for i in range(2, 10)]
    FLT = [f"%f{i}" for i in range(1, 6)]

    def __init__(self, rng: random.Random, name: str, adversarial: bool):
        self.rng = rng
        self.name = name
        self.adv = adversarial
        self.b = _Body(rng, name)
        self.use_local = rng.random() < 0.4
        self.use_shared = rng.random() < 0.3
        self.helper = rng.random() < 0.3
        self.getter = rng.random() < 0.25
        self.attacks: list[str] = []
        self.foreign = False

    # -- helpers --------------------------------------------------------------

    def r(self):
        return self.rng.choice(self.DATA)

    def val(self):
        if self.rng.random() < 0.3:
            return str(self.rng.randrange(0, 1 << 16))
        return self.r()

    def address(self) -> str:
        """Emit an in-bounds slot address computation; return the register."""
        rng, e = self.rng, self.b.emit
        reg = rng.choice(self.ADDR)
        e(f"mul.lo.u32 %r14, %r5, {rng.randrange(1, 8)};")
        e(f"add.u32 %r14, %r14, {rng.randrange(0, 64)};")
        e("rem.u32 %r14, %r14, %r0;")
        e(f"mul.wide.u32 %rd10, %r14, {SLOT};")
        e(f"add.s64 {reg}, {rng.choice(['%rd0', '%rd1'])}, %rd10;")
        return reg

    @staticmethod
    def at(reg: str, off: int) -> str:
        if off == 0:
            return f"[{reg}]"
        return f"[{reg}+{off}]" if off > 0 else f"[{reg}-{-off}]"

    # -- statement kinds ------------------------------------------------------

    def arith(self) -> None:
        rng, e = self.rng, self.b.emit
        k = rng.randrange(10)
        d = self.r()
        if k == 0:
            e(f"{rng.choice(['add', 'sub', 'xor', 'and', 'or'])}.b32 {d}, {self.r()}, {self.val()};"
              .replace("add.b32", "add.u32").replace("sub.b32", "sub.u32"))
        elif k == 1:
            e(f"mul.lo.u32 {d}, {self.r()}, {self.val()};")
        elif k == 2:
            e(f"{rng.choice(['shl.b32', 'shr.u32', 'shr.s32'])} {d}, {self.r()}, {rng.randrange(32)};")
        elif k == 3:
            e(f"{rng.choice(['min.u32', 'max.s32', 'min.s32', 'max.u32'])} {d}, {self.r()}, {self.val()};")
        elif k == 4:
            cmp = rng.choice(["lt", "ge", "eq", "ne", "lo", "hi"])
            ty = "u32" if cmp in ("lo", "hi") else rng.choice(["u32", "s32"])
            e(f"setp.{cmp}.{ty} %p3, {self.r()}, {self.val()};")
            e(f"selp.b32 {d}, {self.r()}, {self.val()}, %p3;")
        elif k == 5:
            e(f"mad.lo.u32 {d}, {self.r()}, {self.val()}, {self.r()};")
        elif k == 6:
            d64 = rng.choice(self.DATA64)
            e(f"cvt.u64.u32 {d64}, {self.r()};")
            e(f"add.s64 {d64}, {d64}, {rng.choice(self.DATA64)};")
        elif k == 7:
            f = rng.choice(self.FLT)
            e(f"cvt.rn.f32.u32 {f}, {self.r()};")
            e(f"{rng.choice(['add', 'mul', 'sub'])}.f32 {rng.choice(self.FLT)}, {f}, {rng.choice(self.FLT)};")
        elif k == 8:
            e(f"not.b32 {d}, {self.r()};")
        else:
            e(f"mul.hi.u32 {d}, {self.r()}, {self.val()};")

    def global_access(self, pred: str | None = None) -> None:
        rng, e = self.rng, self.b.emit
        reg = self.address()
        space = rng.choice(["global.", "global.", ""])
        p = f"@{pred} " if pred else ""
        k = rng.randrange(12)
        if k == 0:
            e(f"{p}ld.{space}u32 {self.r()}, {self.at(reg, rng.choice([0, 4, 8, 12]))};")
        elif k == 1:
            e(f"{p}st.{space}u32 {self.at(reg, rng.choice([0, 4, 8, 12]))}, {self.val()};")
        elif k == 2:
            e(f"{p}ld.{space}u64 {rng.choice(self.DATA64)}, {self.at(reg, rng.choice([0, 8]))};")
        elif k == 3:
            e(f"{p}st.{space}u64 {self.at(reg, rng.choice([0, 8]))}, {rng.choice(self.DATA64)};")
        elif k == 4:
            e(f"{p}ld.{space}f32 {rng.choice(self.FLT)}, {self.at(reg, rng.choice([0, 4, 8, 12]))};")
        elif k == 5:
            e(f"{p}st.{space}f32 {self.at(reg, rng.choice([0, 4, 8, 12]))}, {rng.choice(self.FLT)};")
        elif k == 6:
            a, b = rng.sample(self.DATA, 2)
            op = rng.choice(["ld", "st"])
            off = self.at(reg, rng.choice([0, 8]))
            if op == "ld":
                e(f"{p}ld.{space}v2.u32 {{{a}, {b}}}, {off};")
            else:
                e(f"{p}st.{space}v2.u32 {off}, {{{a}, {b}}};")
        elif k == 7:
            regs = ", ".join(rng.sample(self.DATA, 4))
            e(f"{p}ld.{space}v4.u32 {{{regs}}}, [{reg}];")
        elif k == 8:
            op = rng.choice(["add", "exch", "max", "min", "or", "xor", "and", "inc"])
            ty = "b32" if op in ("exch", "or", "xor", "and") else "u32"
            e(f"{p}atom.{space}{op}.{ty} {self.r()}, {self.at(reg, rng.choice([0, 4, 8, 12]))}, {self.val()};")
        elif k == 9:
            e(f"{p}atom.{space}cas.b32 {self.r()}, {self.at(reg, rng.choice([0, 4, 8, 12]))}, "
              f"{self.r()}, {self.val()};")
        elif k == 10:
            e(f"{p}red.{space}add.u32 {self.at(reg, rng.choice([0, 4, 8, 12]))}, {self.r()};")
        else:
            e(f"{p}atom.{space}add.u64 {rng.choice(self.DATA64)}, {self.at(reg, rng.choice([0, 8]))}, 1;")

    def local_access(self) -> None:
        rng, e = self.rng, self.b.emit
        off = rng.randrange(0, 16) * 4
        if rng.random() < 0.3:
            e("cvta.local.u64 %rd16, %rd11;")
            base, space = "%rd16", ""
        else:
            base, space = "%rd11", "local."
        if rng.random() < 0.5:
            e(f"st.{space}u32 {self.at(base, off)}, {self.val()};")
        else:
            e(f"ld.{space}u32 {self.r()}, {self.at(base, off)};")

    def shared_access(self) -> None:
        rng, e = self.rng, self.b.emit
        off = rng.randrange(0, 64) * 4
        if rng.random() < 0.5:
            e(f"st.shared.u32 [%rd17+{off}], {self.r()};")
        else:
            e(f"ld.shared.u32 {self.r()}, [%rd17+{off}];")

    def predicated(self) -> None:
        rng, e = self.rng, self.b.emit
        e(f"setp.{rng.choice(['lt', 'ge', 'eq'])}.u32 %p1, %r5, {rng.randrange(0, 8)};")
        self.global_access(rng.choice(["%p1", "!%p1"]))

    def switch(self) -> None:
        rng, e = self.rng, self.b.emit
        n = rng.randrange(2, 4)
        table = self.b.label("tbl")
        targets = [self.b.label("case") for _ in range(n)]
        join = self.b.label("join")
        e(f"rem.u32 %r15, {self.r()}, {n};")
        e(f"@@{table}: .branchtargets {', '.join(targets)};")
        e(f"brx.idx %r15, {table};")
        for t in targets:
            e(f"@@{t}:")
            for _ in range(rng.randrange(1, 3)):
                self.simple()
            e(f"bra.uni {join};")
        e(f"@@{join}:")

    def loop(self) -> None:
        rng, e = self.rng, self.b.emit
        head = self.b.label("loop")
        e("mov.u32 %r16, 0;")
        e(f"@@{head}:")
        for _ in range(rng.randrange(1, 3)):
            self.simple()
        e("add.u32 %r16, %r16, 1;")
        e(f"setp.lt.u32 %p2, %r16, {rng.randrange(1, 4)};")
        e(f"@%p2 bra {head};")

    def call(self) -> None:
        rng, e = self.rng, self.b.emit
        if self.helper and rng.random() < 0.5:
            reg = self.address()
            e(f"call.uni {self.name}_put, ({reg}, {self.r()});")
        elif self.getter:
            reg = self.address()
            e(f"call.uni ({self.r()}), {self.name}_get, ({reg});")
        else:
            self.arith()

    def simple(self) -> None:
        rng = self.rng
        k = rng.random()
        if k < 0.35:
            self.arith()
        elif k < 0.75:
            self.global_access()
        elif k < 0.85 and self.use_local:
            self.local_access()
        elif k < 0.92 and self.use_shared:
            self.shared_access()
        else:
            self.predicated()

    def statement(self) -> None:
        k = self.rng.random()
        if k < 0.1:
            self.switch()
        elif k < 0.17:
            self.loop()
        elif k < 0.27:
            self.call()
        else:
            self.simple()

    # -- attacks --------------------------------------------------------------

    def attack(self) -> None:
        rng, e = self.rng, self.b.emit
        kinds = list(ATTACKS)
        if not self.use_local:
            kinds.remove("local-overflow")
        kind = rng.choice(kinds)
        self.attacks.append(kind)
        reg = rng.choice(self.ADDR)
        if kind == "foreign-pointer":
            self.foreign = True  # the buffer argument itself points outside the partition
            e(f"st.global.u32 [%rd1+{rng.choice([0, 4, 8])}], {self.r()};")
        elif kind == "displaced-pointer":
            delta = rng.choice([PART_SIZE, -PART_SIZE, 3 * PART_SIZE + 64, -4096,
                                -(PART_BASE - 0x1000), 1 << 24])
            e(f"add.s64 {reg}, %rd1, {delta};")
            e(f"st.global.u64 [{reg}], {rng.choice(self.DATA64)};")
        elif kind == "large-offset":
            e(f"st.u32 [%rd0+{rng.choice([PART_SIZE, PART_SIZE + 4, 1 << 20, 0x7FFFFFF0])}], {self.r()};")
        elif kind == "negative-offset":
            e(f"ld.global.u32 {self.r()}, [%rd1-{rng.choice([4, 256, 4096, PART_SIZE])}];")
        elif kind == "absolute":
            e(f"st.global.u32 [{rng.choice([0, 0x1000, 0x7FFFFFF0])}], {self.r()};")
        elif kind == "local-overflow":
            off = rng.choice([4096 * 9, PART_SIZE, -PART_SIZE])
            e(f"st.local.u32 {self.at('%rd11', off)}, {self.r()};")
        elif kind == "atomic":
            e(f"add.s64 {reg}, %rd1, {rng.choice([PART_SIZE, -16, 2 * PART_SIZE])};")
            e(f"atom.global.add.u32 {self.r()}, [{reg}], 1;")
        else:  # strided: thread t writes t * 1 MiB past the buffer end
            e("mul.wide.u32 %rd10, %r5, 1048576;")
            e(f"add.s64 {reg}, %rd1, %rd10;")
            e(f"add.s64 {reg}, {reg}, {PART_SIZE};")
            e(f"red.global.add.u32 [{reg}], 1;")

    # -- assembly -------------------------------------------------------------

    def build(self) -> str:
        rng, e, n = self.rng, self.b.emit, self.name
        e(f"ld.param.u64 %rd0, [{n}_buf];")
        e(f"ld.param.u32 %r0, [{n}_n];")
        e(f"ld.param.u32 %r1, [{n}_seed];")
        e(f"ld.param.f32 %f0, [{n}_scale];")
        e("cvta.to.global.u64 %rd1, %rd0;")
        e("mov.u32 %r2, %tid.x;")
        e("mov.u32 %r3, %ctaid.x;")
        e("mov.u32 %r4, %ntid.x;")
        e("mad.lo.s32 %r5, %r3, %r4, %r2;")
        e("xor.b32 %r6, %r1, %r5;")
        e("mov.f32 %f1, %f0;")
        if self.use_local:
            e(f"mov.u64 %rd11, {n}_depot;")
        if self.use_shared:
            e("mov.u64 %rd17, 0;")
        count = rng.randrange(3, 14)
        attack_at = sorted(rng.sample(range(count + 1), rng.randrange(1, 3))) if self.adv else []
        for i in range(count + 1):
            while attack_at and attack_at[0] == i:
                attack_at.pop(0)
                self.attack()
            if i < count:
                self.statement()
        e("ret;")
        body = []
        for line in self.b.lines:
            body.append(line[2:] if line.startswith("@@") else "\t" + line)
        decls = ["\t.reg .pred %p<4>;", "\t.reg .b32 %r<18>;", "\t.reg .b64 %rd<18>;",
                 "\t.reg .f32 %f<6>;"]
        if self.use_local:
            decls.append(f"\t.local .align 8 .b8 {n}_depot[64];")
        params = [f"\t.param .u64 {n}_buf", f"\t.param .u32 {n}_n", f"\t.param .u32 {n}_seed",
                  f"\t.param .f32 {n}_scale"]
        head = f".visible .entry {n}(\n" + ",\n".join(params) + "\n)\n{\n"
        return head + "\n".join(decls + body) + "\n}\n"

    def funcs(self) -> str:
        n = self.name
        out = []
        if self.helper:
            off = self.rng.choice([0, 4, 8, 12])
            out.append(
                f".func {n}_put(\n\t.param .u64 {n}_put_a,\n\t.param .u32 {n}_put_v\n)\n{{\n"
                "\t.reg .b32 %r<3>;\n\t.reg .b64 %rd<2>;\n"
                f"\tld.param.u64 %rd0, [{n}_put_a];\n\tld.param.u32 %r0, [{n}_put_v];\n"
                f"\tld.global.u32 %r1, [%rd0+{off}];\n\tadd.u32 %r1, %r1, %r0;\n"
                f"\tst.global.u32 [%rd0+{off}], %r1;\n\tret;\n}}\n")
        if self.getter:
            off = self.rng.choice([0, 4, 8, 12])
            out.append(
                f".func (.param .u32 {n}_get_ret) {n}_get(\n\t.param .u64 {n}_get_a\n)\n{{\n"
                "\t.reg .b32 %r<2>;\n\t.reg .b64 %rd<2>;\n"
                f"\tld.param.u64 %rd0, [{n}_get_a];\n\tld.u32 %r0, [%rd0+{off}];\n"
                f"\tst.param.u32 [{n}_get_ret], %r0;\n\tret;\n}}\n")
        return "\n".join(out)


def generate_text(seed: int, adversarial: bool = False) -> tuple[str, _KernelGen]:
    rng = random.Random(seed)
    g = _KernelGen(rng, f"gk{seed}", adversarial)
    entry = g.build()
    funcs = g.funcs()
    text = HEADER + "\n" + (funcs + "\n" if funcs else "") + entry
    return text, g


def generate_case(seed: int, adversarial: bool = False) -> GenCase:
    """Deterministically build case number ``seed``."""
    text, g = generate_text(seed, adversarial)
    rng = random.Random(seed ^ 0x5EED)
    module = parse_module(text)
    n = rng.randrange(1, 65)
    grid, block = rng.randrange(1, 3), rng.randrange(1, 5)
    buf = PART_BASE
    if g.foreign:
        other = rng.choice([i for i in range(DEVICE_SIZE // PART_SIZE) if i != PART_INDEX])
        buf = DEVICE_BASE + other * PART_SIZE + rng.randrange(0, 64) * SLOT
    mem = SimMemory(DEVICE_BASE, DEVICE_SIZE)
    mem.write(PART_BASE, rng.randbytes(n * SLOT))
    # sentinels in the neighbouring partitions make corruption visible
    mem.write(PART_BASE - 4096, rng.randbytes(4096))
    mem.write(PART_BASE + PART_SIZE, rng.randbytes(4096))
    if g.foreign:
        mem.write(buf, rng.randbytes(64 * SLOT))
    args = (DevAddr(buf), Scalar32(n), Scalar32(rng.randrange(1 << 32)), F32(rng.uniform(-4, 4)))
    cfg = LaunchConfig(grid, block, args, local_top=PART_BASE + PART_SIZE)
    return GenCase(seed, adversarial, text, module, f"gk{seed}", cfg, mem, attacks=g.attacks)


def generate_module(seed: int) -> PtxModule:
    return generate_case(seed).module
