from pathlib import Path

import pytest

from grdsim.manager import ManagerConfig, Status
from grdsim.patcher import SandboxMode
from grdsim.scenario import ScenarioError, load_scenario, parse_scenario, run_scenario

SCENARIOS = Path(__file__).parent.parent / "scenarios"


def test_parse_basic():
    sc = parse_scenario("""
        client a partition 64K   # comment
        a: malloc buf 100
        a: h2d buf 4 00ff*2 11
        a: d2h buf 0 8 expect 00000000 00ff00ff
        a: d2h buf 0 1 expect *
        a: launch k grid 2 block 3 args buf+8 u32:-1 f32:1.5 2.5 ptr:base-16 7
        a: free buf status UNKNOWN_ALLOC
    """)
    assert sc.clients == ["a"]
    decl, malloc, h2d, d2h, d2h_any, launch, free = sc.items
    assert decl.partition == 64 << 10
    assert malloc.args == ("buf", 100)
    assert h2d.args == ("buf", 4, bytes.fromhex("00ff00ff11"))
    assert d2h.expect == bytes.fromhex("0000000000ff00ff")
    assert d2h_any.expect is None
    assert launch.args == ("k", 2, 3, ("buf+8", "u32:-1", "f32:1.5", "2.5", "ptr:base-16", "7"))
    assert free.status is Status.UNKNOWN_ALLOC


@pytest.mark.parametrize("text", [
    "a: sync",                                          # undeclared client
    "client a partition 4K\nclient a partition 4K",     # declared twice
    "client a partition 4K\na: free buf",               # unknown variable
    "client a partition 4K\na: launch k grid 1 block 1 args buf",
    "client a partition 4K\na: d2h base 0 4 expect 00",  # length mismatch
    "client a partition 4K\na: frobnicate",
    "client a partition 4K\na: sync status NOPE",
    "client a partition lots",
    "client a partition 4K\na: malloc x 16 status PARTITION_OOM\na: free x",
])
def test_parse_errors(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_variables_are_per_client():
    with pytest.raises(ScenarioError):
        parse_scenario("client a partition 4K\nclient b partition 4K\na: malloc x 16\nb: free x")


def test_only_keeps_one_client():
    sc = load_scenario(SCENARIOS / "mix4.scn")
    solo = sc.only("b")
    assert solo.clients == ["b"] and all(i.client == "b" for i in solo.items)


@pytest.mark.parametrize("name", ["isolation", "roundtrip", "mix4", "transfers"])
@pytest.mark.parametrize("mode", list(SandboxMode), ids=lambda m: m.value)
def test_shipped_scenarios_pass(name, mode):
    r = run_scenario(load_scenario(SCENARIOS / f"{name}.scn"), ManagerConfig(mode=mode))
    assert r.ok, r.failures


def test_liveness_scenario():
    r = run_scenario(load_scenario(SCENARIOS / "liveness.scn"), ManagerConfig(step_limit=20000))
    assert r.ok, r.failures


def test_unprotected_isolation_fails():
    r = run_scenario(load_scenario(SCENARIOS / "isolation.scn"), ManagerConfig(unprotected=True))
    assert not r.ok and "d2h mismatch" in r.failures[0]


def test_runner_reports_wrong_status_and_bytes(tmp_path):
    (tmp_path / "s.scn").write_text(
        "client a partition 4K\n"
        "a: malloc buf 16\n"
        "a: h2d buf 0 01020304\n"
        "a: d2h buf 0 4 expect 01020305\n"
        "a: d2h buf 4096 4 expect *\n"
        "a: load missing.ptx\n")
    r = run_scenario(load_scenario(tmp_path / "s.scn"))
    assert len(r.failures) == 3
    assert "line 4" in r.failures[0] and "mismatch" in r.failures[0]
    assert "OOB_TRANSFER" in r.failures[1]
    assert "cannot read" in r.failures[2]


def test_dispatch_log_is_deterministic():
    sc = load_scenario(SCENARIOS / "mix4.scn")
    a, b = run_scenario(sc), run_scenario(sc)
    key = [(d.app_id, d.seq, d.name, d.status) for d in a.dispatch]
    assert key == [(d.app_id, d.seq, d.name, d.status) for d in b.dispatch]
    assert len(key) == 7


def test_disconnect_releases_partition(tmp_path):
    (tmp_path / "s.scn").write_text(
        "client a partition 4K\n"
        "a: h2d base 0 ff*16\n"
        "a: disconnect\n"
        "client b partition 4K\n"
        "b: d2h base 0 16 expect 00*16\n")
    r = run_scenario(load_scenario(tmp_path / "s.scn"))
    assert r.ok, r.failures
