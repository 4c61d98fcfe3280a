"""Acceptance criteria 1-10.  Each test prints one PASS/FAIL line; the lines are
repeated in the pytest terminal summary.  Run alone with

    pytest tests/test_acceptance.py -s
"""

import random
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from grdsim.allocator import PartitionBoundsTable
from grdsim.kernelgen import generate_case, generate_module
from grdsim.manager import ManagerConfig
from grdsim.patcher import SandboxMode, compute_mask, fence_bitwise, fence_modulo, sandbox_module
from grdsim.ptx import emit_module, parse_module
from grdsim.scenario import load_scenario, run_scenario

from oracles import round_robin_violations, run_case
from workloads import check_range_mismatches, fuzz_partition, fuzz_partitions, random_script

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).parent.parent
DATA = Path(__file__).parent / "data"
SCENARIOS = ROOT / "scenarios"
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_1_mask_arithmetic():
    base, size = 0x7FA2D0000000, 16 << 20
    mask = compute_mask(size)
    lo = fence_bitwise(0, base, mask)
    hi = fence_bitwise((1 << 64) - 1, base, mask)
    ok = mask == 0xFFFFFF and (lo, hi) == (0x7FA2D0000000, 0x7FA2D0FFFFFF)
    report(1, ok, f"compute_mask(16 MiB)=0x{mask:X}, fenced range [0x{lo:x}, 0x{hi:x}]")


def test_2_listing1_golden():
    t = time.perf_counter()
    m = parse_module((DATA / "listing1.ptx").read_text())
    out, rep = sandbox_module(m, SandboxMode.FENCE_BITWISE)
    text = emit_module(out)
    elapsed = time.perf_counter() - t
    k, orig = out.entries[0], m.entries[0]
    body = [str(s) for s in k.body]
    st_at = next(i for i, s in enumerate(body) if s.startswith("st.global.u32"))
    checks = {
        "golden": text == (DATA / "listing1_fence_bitwise.ptx").read_text(),
        "2 u64 params": [p.type for p in k.params[len(orig.params):]] == ["u64", "u64"],
        "1 b64 bank": [d.type for d in k.reg_decls if d not in orig.reg_decls] == ["b64"],
        "2 ld.param": sum(s.startswith("ld.param.u64") and "_grd_" in s for s in body) == 2,
        "and/or before st": body[st_at - 2].startswith("and.b64") and body[st_at - 1].startswith("or.b64"),
        "< 1 s": elapsed < 1.0,
    }
    failed = [name for name, ok in checks.items() if not ok]
    report(2, not failed, f"{len(checks) - len(failed)}/{len(checks)} checks, {elapsed * 1000:.1f} ms"
           + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_3_instruction_count_law():
    want = {"direct": 2, "base+offset": 3}
    counts = {"direct": 0, "base+offset": 0}
    bad, worst = [], 0
    for seed in range(200):
        m = generate_module(seed)
        for mode in SandboxMode:
            _, rep = sandbox_module(m, mode)
            for kr in rep.kernels:
                for idx, addressing, n in kr.accesses:
                    worst = max(worst, n)
                    if n > 4:
                        bad.append((seed, mode.value, kr.kernel, idx, n))
                    if mode is SandboxMode.FENCE_BITWISE:
                        counts[addressing] += 1
                        if n != want[addressing]:
                            bad.append((seed, kr.kernel, idx, addressing, n))
    report(3, not bad, f"200 kernels, {counts['direct']} direct x2 and {counts['base+offset']} "
           f"base+offset x3 (fence-bitwise); max over all modes {worst}; {len(bad)} violations")


def test_4_in_bounds_equivalence():
    t = time.perf_counter()
    cases = [generate_case(seed) for seed in range(1000)]
    mismatches, escaped = [], set()
    for mode in SandboxMode:
        for c in cases:
            v = run_case(c, mode)
            if not v.original_in_bounds:
                escaped.add(c.seed)  # not an in-partition pair; excluded from the oracle
            elif not v.memories_identical:
                mismatches.append((c.seed, mode.value))
    elapsed = time.perf_counter() - t
    in_bounds = len(cases) - len(escaped)
    ok = not mismatches and in_bounds >= 1000 and elapsed < 60
    report(4, ok, f"{in_bounds} in-partition pairs x 3 modes, {len(mismatches)} mismatches, "
           f"{elapsed:.1f} s")


def test_5_containment():
    violations = []
    n_cases, exits = 0, 0
    for seed in range(1000):
        c = generate_case(seed, adversarial=True)
        lo, hi = c.base, c.base + c.size
        n_cases += 1
        for mode in SandboxMode:
            v = run_case(c, mode)
            trace = v.sandboxed_trace
            if v.original_in_bounds:
                violations.append((seed, "original stayed in bounds"))
            if not v.contained or not v.outside_untouched or trace.escapes(lo, hi):
                violations.append((seed, mode.value))
            if mode is SandboxMode.CHECK:
                exits += v.oob_exits
                if v.oob_exits < 1:
                    violations.append((seed, "check: no oob exit"))
    report(5, not violations, f"{n_cases} adversarial pairs x 3 modes, {exits} check-mode exits, "
           f"{len(violations)} violations")


def _exhaustive_16bit() -> tuple[int, int]:
    """All a, all power-of-two s, all s-aligned b in a 16-bit address space."""
    n = 1 << 16
    a = np.arange(n, dtype=np.uint16)
    # every value a - b can take, mod 2**32; remainders are computed once per value
    diffs = (np.arange(-(n - 1), n, dtype=np.int64) & 0xFFFFFFFF).astype(np.uint32)
    bad = total = 0
    for k in range(17):
        s, mask = 1 << k, np.uint16((1 << k) - 1)
        rows = sliding_window_view((diffs % np.uint32(s)).astype(np.uint16), n)  # row j: (a-(n-1-j)) mod s
        bs = np.arange(0, n, s, dtype=np.uint16)
        for i in range(0, len(bs), 1024):
            b = bs[i:i + 1024]
            lhs = (a & mask) | b[:, None]
            rhs = rows[(n - 1) - b.astype(np.int64)] + b[:, None]
            bad += int(np.count_nonzero(lhs != rhs))
            total += lhs.size
    return bad, total


def test_6_mode_agreement():
    bad, total = _exhaustive_16bit()
    rng = random.Random(6)
    rbad = 0
    for _ in range(10**6):
        e = rng.randrange(64)
        s = 1 << e
        b = rng.getrandbits(64 - e) << e
        a = rng.getrandbits(64)
        if fence_bitwise(a, b, s - 1) != fence_modulo(a, b, s):
            rbad += 1
    report(6, bad == 0 and rbad == 0,
           f"exhaustive 16-bit: {total} (a, s, b) triples, {bad} disagree; "
           f"10^6 random 64-bit samples, {rbad} disagree")


def _grd_run(*args):
    return subprocess.run([sys.executable, "-c", "import sys; from grdsim.cli import run_main; "
                           "sys.exit(run_main(sys.argv[1:]))", *args],
                          capture_output=True, text=True, timeout=600)


def test_7_end_to_end_isolation():
    isolation = str(SCENARIOS / "isolation.scn")
    protected = _grd_run(isolation)
    unprotected = _grd_run(isolation, "--unprotected")
    corrupted = unprotected.returncode == 1 and "d2h mismatch" in unprotected.stderr
    sc = load_scenario(SCENARIOS / "mix4.scn")
    differing = []
    for mode in SandboxMode:
        shared = run_scenario(sc, ManagerConfig(mode=mode))
        for client in sc.clients:
            solo = run_scenario(sc.only(client), ManagerConfig(mode=mode))
            if not (shared.ok and solo.ok) or solo.reads[client] != shared.reads[client]:
                differing.append((mode.value, client))
    ok = protected.returncode == 0 and corrupted and not differing
    report(7, ok, f"isolation exit {protected.returncode} protected, {unprotected.returncode} "
           f"unprotected ({'corruption shown' if corrupted else 'NO corruption'}); 4-client mix "
           f"solo vs shared in 3 modes: {len(differing)} differing clients")


def test_8_transfer_validation():
    mismatches = checked = 0
    for sizes in ([4096, 4096], [4096, 1 << 16, 8192], [1 << 20, 4096]):
        t = PartitionBoundsTable(0x7FA2C0000000, 1 << 24)
        for i, s in enumerate(sizes):
            t.create_partition(i, s)
        for i in range(len(sizes)):
            mismatches += len(check_range_mismatches(t, i))
            checked += 1
    top = PartitionBoundsTable((1 << 64) - (1 << 20), 1 << 20)
    top.create_partition("low", 1 << 19)
    rec = top.create_partition("end", 1 << 19)
    assert rec.end == 1 << 64
    for app in ("low", "end"):
        mismatches += len(check_range_mismatches(top, app))
        checked += 1
    report(8, mismatches == 0, f"+/-2 bytes around both edges of {checked} partitions (including one "
           f"ending at 2^64) plus 64-bit wraparound ranges; {mismatches} mismatches")


def test_9_scheduler_contract():
    violations = []
    for seed in range(120):
        m, clients, sent = random_script(seed, eager=seed % 2 == 0)
        v = round_robin_violations(m.dispatch_log, [c.app for c in clients])
        for c in clients:
            seqs = [r.seq for r in m.dispatch_log if r.app_id == c.app]
            if seqs != list(range(len(seqs))):
                v.append(f"app {c.app} FIFO")
            if len(c.collect()) != sent[c.cid]:
                v.append(f"app {c.app} missing replies")
        violations.extend((seed, x) for x in v)
    report(9, not violations, f"120 random multi-client scripts (eager and lazy dispatch); "
           f"{len(violations)} FIFO/round-robin violations")


def test_10_allocator_soundness():
    t = time.perf_counter()
    for seed, psize in ((1, 1 << 16), (2, 1 << 14), (3, 1 << 20)):
        fuzz_partition(seed, 10_000, psize)
    fuzz_partitions(4, 10_000)
    report(10, True, f"3 partitions x 10k malloc/free vs bitmap oracle, 10k partition create/destroy "
           f"vs block map, invariants after every op; {time.perf_counter() - t:.1f} s")
