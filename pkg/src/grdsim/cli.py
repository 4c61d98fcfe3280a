"""Command-line entry points: grd-patch, grd-inspect, grd-run, grd-manager."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .allocator import DEFAULT_DEVICE_BASE, DEFAULT_DEVICE_SIZE
from .errors import AddressSize32Error, AlreadySandboxed, PtxError, PtxSyntaxError, UnsupportedFeature
from .interp.machine import DEFAULT_STEP_LIMIT
from .patcher import SandboxMode, instrumentation_report_json, sandbox_module
from .ptx import emit_module, list_memory_ops, parse_module

EXIT_OK, EXIT_PARSE, EXIT_UNSUPPORTED = 0, 1, 2


def _mode_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", type=SandboxMode.parse, default=SandboxMode.FENCE_BITWISE,
                   metavar="{fence-bitwise,fence-modulo,check}",
                   help="bounds enforcement to insert (default: fence-bitwise)")
    p.add_argument("--inline-reciprocal", action="store_true",
                   help="lower fence-modulo with the reciprocal multiply instead of rem.u64")


def _device_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--device-base", type=lambda s: int(s, 0), default=DEFAULT_DEVICE_BASE)
    p.add_argument("--device-size", type=lambda s: int(s, 0), default=DEFAULT_DEVICE_SIZE)
    p.add_argument("--step-limit", type=int, default=DEFAULT_STEP_LIMIT,
                   help="instructions per thread before a launch is aborted")
    p.add_argument("--native-when-solo", action="store_true",
                   help="launch the uninstrumented kernel while only one client is connected")
    p.add_argument("--unprotected", action="store_true",
                   help="disable patching (demonstrates cross-client corruption)")


# -- grd-patch ----------------------------------------------------------------


def patch_main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="grd-patch", description="Sandbox the kernels of a PTX file.")
    p.add_argument("input", help="PTX source file")
    p.add_argument("-o", "--output", help="where to write the sandboxed PTX (default: stdout)")
    _mode_arg(p)
    p.add_argument("--lenient", action="store_true",
                   help="keep unmodeled non-memory statements verbatim instead of failing")
    p.add_argument("--report", metavar="PATH", help="write the instrumentation report as JSON")
    a = p.parse_args(argv)
    if a.lenient:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        text = Path(a.input).read_text()
    except OSError as e:
        print(f"grd-patch: {e}", file=sys.stderr)
        return EXIT_PARSE
    try:
        m = parse_module(text, strict=not a.lenient)
        out, report = sandbox_module(m, a.mode, inline_reciprocal=a.inline_reciprocal)
    except PtxSyntaxError as e:
        print(f"{a.input}:{e.line}: error: {e.reason}", file=sys.stderr)
        return EXIT_PARSE
    except (UnsupportedFeature, AddressSize32Error) as e:
        print(f"{a.input}:{e.line}: unsupported: {e.reason}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except AlreadySandboxed as e:
        print(f"{a.input}: {e}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    result = emit_module(out)
    if a.output:
        Path(a.output).write_text(result)
    else:
        sys.stdout.write(result)
    if a.report:
        Path(a.report).write_text(instrumentation_report_json(report))
    return EXIT_OK


# -- grd-inspect --------------------------------------------------------------

COLUMNS = ("kernels", "funcs", "loads", "stores", "atomics", "indirect_branches")
HEADINGS = ("#kernels", "#func", "#total loads", "#total stores", "#atomics", "#indirect br")


def inspect_module_text(text: str, strict: bool = True) -> dict[str, int]:
    """Per-file counts; loads, stores and atomics count only the safeguarded ones."""
    m = parse_module(text, strict=strict)
    row = dict.fromkeys(COLUMNS, 0)
    row["kernels"] = len(m.entries)
    row["funcs"] = len(m.funcs)
    for k in m.kernels:
        for op in list_memory_ops(k):
            if not op.instrumentable:
                continue
            key = {"ld": "loads", "st": "stores"}.get(op.opcode, "atomics")
            row[key] += 1
        row["indirect_branches"] += sum(1 for i in k.instructions() if i.opcode == "brx_idx")
    return row


def _collect(paths: list[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("*.ptx")))
        else:
            files.append(p)
    return files


def inspect_main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="grd-inspect",
                                description="Count kernels and safeguarded memory instructions.")
    p.add_argument("paths", nargs="*", default=[], help="PTX files or directories")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.add_argument("--lenient", action="store_true", help="parse in lenient mode")
    a = p.parse_args(argv)
    rows, errors = [], []
    totals = dict.fromkeys(COLUMNS, 0)
    for f in _collect(a.paths):
        try:
            row = inspect_module_text(f.read_text(), strict=not a.lenient)
        except (OSError, PtxError) as e:
            errors.append({"name": str(f), "error": str(e)})
            continue
        rows.append({"name": str(f), **row})
        for c in COLUMNS:
            totals[c] += row[c]
    if a.json:
        print(json.dumps({"files": rows, "errors": errors, "totals": totals}, indent=2))
    else:
        width = max([len(r["name"]) for r in rows] + [len("TOTAL"), len("name")])
        print(f"{'name':<{width}}  " + "  ".join(HEADINGS))
        for r in [*rows, {"name": "TOTAL", **totals}]:
            cells = "  ".join(f"{r[c]:>{len(h)}}" for c, h in zip(COLUMNS, HEADINGS))
            print(f"{r['name']:<{width}}  {cells}")
        for e in errors:
            print(f"{e['name']}: error: {e['error']}", file=sys.stderr)
    return 1 if errors else 0


# -- grd-run ------------------------------------------------------------------


def _manager_config(a):
    from .manager import ManagerConfig
    return ManagerConfig(mode=a.mode, device_base=a.device_base, device_size=a.device_size,
                         native_when_solo=a.native_when_solo, unprotected=a.unprotected,
                         inline_reciprocal=a.inline_reciprocal, step_limit=a.step_limit)


def run_main(argv: list[str] | None = None) -> int:
    from .scenario import ScenarioError, load_scenario, run_scenario

    p = argparse.ArgumentParser(prog="grd-run", description="Execute a multi-client scenario.")
    p.add_argument("scenario", help="scenario script")
    _mode_arg(p)
    _device_args(p)
    p.add_argument("--trace", action="store_true", help="print dispatch order and access traces")
    p.add_argument("--connect", metavar="PATH", help="use a running grd-manager at this socket")
    a = p.parse_args(argv)
    try:
        sc = load_scenario(a.scenario)
    except (OSError, ScenarioError) as e:
        print(f"grd-run: {a.scenario}: {e}", file=sys.stderr)
        return 2
    cfg = _manager_config(a)
    cfg.record_traces = a.trace
    result = run_scenario(sc, cfg, connect=a.connect)
    if a.trace:
        names = {v: k for k, v in result.apps.items()}
        for d in result.dispatch:
            who = names.get(d.app_id, d.app_id)
            what = f"launch {d.name}" if d.kind == "launch" else "d2d"
            flag = " native" if d.native else ""
            print(f"dispatch {d.index} client {who} #{d.seq} {what} {d.status.name}"
                  f" oob_exits={d.oob_exits}{flag}")
            if d.trace is not None:
                for e in d.trace.entries:
                    print(f"  t{e.thread} {e.func}:{e.index} {e.kind} {e.space} 0x{e.addr:x} {e.width}")
    for f in result.failures:
        print(f"{a.scenario}: {f}", file=sys.stderr)
    print(f"{'PASS' if result.ok else 'FAIL'} {a.scenario}: {len(result.failures)} failure(s)")
    return 0 if result.ok else 1


# -- grd-manager --------------------------------------------------------------


def manager_main(argv: list[str] | None = None) -> int:
    import signal

    from .manager import Manager
    from .manager.server import Server

    p = argparse.ArgumentParser(prog="grd-manager", description="Serve clients over a unix socket.")
    p.add_argument("--listen", required=True, metavar="PATH", help="unix socket path")
    p.add_argument("--modules-dir", metavar="DIR", help="patch and register every *.ptx here at startup")
    p.add_argument("--lazy", action="store_true",
                   help="dispatch only while a client waits (deterministic ordering)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    _mode_arg(p)
    _device_args(p)
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2),
                        format="grd-manager %(levelname)s: %(message)s")
    cfg = _manager_config(a)
    cfg.lazy_dispatch = a.lazy
    try:
        m = Manager(cfg)
    except ValueError as e:
        print(f"grd-manager: {e}", file=sys.stderr)
        return 2
    if a.modules_dir:
        failures = m.load_directory(a.modules_dir)
        if failures:
            for f in failures:
                print(f"grd-manager: {f}", file=sys.stderr)
            return 1
    server = Server(m, a.listen)
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: server.stop())
    return server.serve_forever()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(patch_main())
