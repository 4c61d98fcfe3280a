import json
from pathlib import Path

import pytest

from grdsim.cli import inspect_main, manager_main, patch_main, run_main

DATA = Path(__file__).parent / "data"
SCENARIOS = Path(__file__).parent.parent / "scenarios"


def test_patch_writes_golden_and_report(tmp_path):
    out, rep = tmp_path / "out.ptx", tmp_path / "rep.json"
    assert patch_main([str(DATA / "listing1.ptx"), "-o", str(out), "--report", str(rep)]) == 0
    assert out.read_text() == (DATA / "listing1_fence_bitwise.ptx").read_text()
    doc = json.loads(rep.read_text())
    assert doc["mode"] == "fence-bitwise"


def test_patch_stdout_and_modes(capsys):
    assert patch_main([str(DATA / "one_store.ptx"), "--mode", "check"]) == 0
    assert capsys.readouterr().out == (DATA / "one_store_check.ptx").read_text()


@pytest.mark.parametrize("text, code", [
    (".version 7.0\n.target sm_70\n.address_size 64\n.visible .entry k( {", 1),
    (".version 7.0\n.target sm_70\n.address_size 32\n.visible .entry k() { ret; }", 2),
])
def test_patch_exit_codes(tmp_path, text, code):
    f = tmp_path / "k.ptx"
    f.write_text(text)
    assert patch_main([str(f)]) == code


def test_patch_refuses_sandboxed_input(tmp_path):
    once = tmp_path / "once.ptx"
    assert patch_main([str(DATA / "one_store.ptx"), "-o", str(once)]) == 0
    assert patch_main([str(once)]) == 2


def test_patch_missing_file(tmp_path):
    assert patch_main([str(tmp_path / "nope.ptx")]) == 1


def test_inspect_table_and_json(capsys):
    kernels = SCENARIOS / "kernels"
    assert inspect_main([str(kernels)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert "#indirect br" in table[0] and table[-1].startswith("TOTAL")
    assert inspect_main([str(kernels / "histogram.ptx"), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["totals"]["kernels"] == 1 and doc["totals"]["funcs"] == 1
    assert doc["totals"]["atomics"] == 1 and doc["totals"]["loads"] == 1


def test_inspect_reports_bad_files(tmp_path, capsys):
    (tmp_path / "bad.ptx").write_text("garbage")
    assert inspect_main([str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_run_exit_codes(tmp_path, capsys):
    assert run_main([str(SCENARIOS / "roundtrip.scn")]) == 0
    assert capsys.readouterr().out.startswith("PASS")
    assert run_main([str(SCENARIOS / "isolation.scn"), "--unprotected"]) == 1
    (tmp_path / "bad.scn").write_text("a: sync\n")
    assert run_main([str(tmp_path / "bad.scn")]) == 2


def test_run_trace_lists_dispatches(capsys):
    assert run_main([str(SCENARIOS / "roundtrip.scn"), "--trace", "--mode", "fence-modulo"]) == 0
    out = capsys.readouterr().out
    assert "dispatch 0" in out and " store global 0x" in out


def test_manager_rejects_bad_modules_dir(tmp_path):
    (tmp_path / "bad.ptx").write_text("garbage")
    assert manager_main(["--listen", str(tmp_path / "s.sock"), "--modules-dir", str(tmp_path)]) == 1
