import json
import subprocess
import sys
from fractions import Fraction

import pytest

from builders import nop_snapshot
from corefuzz.backends import FaultProfile, IllegalOvershoot, StickyFlag, profile_to_json
from corefuzz.checker import MachineSpec
from corefuzz.cli import main, parse_backend_spec, read_dictionary, UsageError
from corefuzz.snapshot import serialize


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def nop(tmp_path):
    p = tmp_path / "nop.snap"
    p.write_bytes(serialize(nop_snapshot()))
    return p


def test_dump_commands_checksum_all(capsys, nop):
    code, out, _ = run(capsys, "play", "--snapshot", nop, "--backend", "interp", "--dump-commands",
                       "--checksum-all")
    assert code == 0
    cmds = [json.loads(x) for x in out.splitlines()]
    assert [c["command"] for c in cmds] == [
        "MapMemory", "WriteMemory", "ProtectMemory", "ExecuteSnapshot", "ChecksumMemory",
    ]
    assert cmds[0] == {"command": "MapMemory", "start": "0x10000000", "num_bytes": 4096}
    assert cmds[2]["perms"] == "r-x"
    assert cmds[3]["registers"]["rip"] == "0x10000000"
    assert cmds[4] == {"command": "ChecksumMemory", "start": "0x10000000", "num_bytes": 4096}


def test_play_nop(capsys, nop):
    code, out, _ = run(capsys, "play", "--snapshot", nop, "--backend", "interp")
    assert code == 0 and json.loads(out)["verdict"] == "MATCH"


def test_play_mismatch_exits_one(capsys, tmp_path):
    from corefuzz.backends import InterpBackend
    from corefuzz.maker import make_snapshot
    s = tmp_path / "ud2.snap"
    s.write_bytes(serialize(make_snapshot(b"\x0f\x0b", InterpBackend())))
    prof = tmp_path / "p.json"
    prof.write_text(json.dumps([profile_to_json(FaultProfile("o", frozenset({0}), Fraction(1), IllegalOvershoot(2)))]))
    code, out, _ = run(capsys, "play", "--snapshot", s, "--backend", f"faulted:profiles={prof}:core=0")
    assert code == 1 and json.loads(out)["verdict"] == "MISMATCH"


def test_isa_dump(capsys):
    code, out, _ = run(capsys, "isa", "dump")
    assert code == 0 and "MUL" in out and len(out.splitlines()) > 20


@pytest.mark.parametrize("argv, needle", [
    (["play", "--snapshot", "/nonexistent.snap", "--backend", "interp"], "does not exist"),
    (["play", "--snapshot", "NOP", "--backend", "quantum"], "unknown backend kind"),
    (["play", "--snapshot", "NOP", "--backend", "interp:bogus=1"], "bad backend option"),
    (["play", "--snapshot", "NOP", "--backend", "faulted"], "profiles=FILE"),
    (["make", "--in", "/nonexistent", "--out", "OUT", "--backends", "interp"], "does not exist"),
    (["make", "--in", "OUT", "--out", "OUT", "--backends", "interp", "--jobs", "0"], "--jobs"),
    (["check", "--corpus", "OUT", "--fleet", "F", "--config", "C", "--log", "L", "--trials", "0"], "--trials"),
    (["triage", "--log", "/nonexistent.jsonl"], "does not exist"),
    (["fuzz", "--proxy", "interp"], "required"),
    (["frobnicate"], "invalid choice"),
])
def test_usage_errors_exit_two(capsys, tmp_path, nop, argv, needle):
    argv = [str(nop) if a == "NOP" else str(tmp_path) if a == "OUT" else a for a in argv]
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert needle in err


def test_malformed_config_exits_two(capsys, tmp_path, nop):
    corpus = tmp_path / "c"
    corpus.mkdir()
    (corpus / "nop.snap").write_bytes(nop.read_bytes())
    (tmp_path / "fleet.json").write_text(json.dumps([MachineSpec("m", 2).to_json()]))
    (tmp_path / "cfg.json").write_text('{"batch_size": 0}')
    code, _, err = run(capsys, "check", "--corpus", corpus, "--fleet", tmp_path / "fleet.json",
                       "--config", tmp_path / "cfg.json", "--log", tmp_path / "log", "--trials", 1)
    assert code == 2 and "batch_size" in err


def test_backend_specs(tmp_path):
    b = parse_backend_spec("interp:platform=x:mask=CF|ZF:core=3")
    assert (b.descriptor.platform_id, b.descriptor.core_id, b.flags_mask) == ("x", 3, 0x41)
    with pytest.raises(UsageError):
        parse_backend_spec("interp:mask=QF")


def test_read_dictionary(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("0f 0b  # ud2\n\n48 f7 e3\n")
    assert read_dictionary(f) == [b"\x0f\x0b", b"\x48\xf7\xe3"]
    f.write_text("zz\n")
    with pytest.raises(UsageError):
        read_dictionary(f)


def test_gen_is_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "gen", "--seed", 4, "--count", 30, "--max-instrs", 8, "--out", tmp_path / d)[0] == 0
    a = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    b = {p.name: p.read_bytes() for p in (tmp_path / "b").iterdir()}
    assert a == b and 0 < len(a) <= 30


def _pipeline(capsys, root, fleet):
    raw, made, dist = root / "raw", root / "made", root / "dist"
    seeds = root / "seeds"
    assert run(capsys, "gen", "--seed", 1, "--count", 40, "--max-instrs", 10, "--out", seeds)[0] == 0
    dict_file = root / "dict.txt"
    dict_file.write_text("0f 0b\n48 f7 e3\n")
    assert run(capsys, "fuzz", "--proxy", "interp", "--seed", 2, "--budget", 1500, "--out", raw,
               "--dict", dict_file, "--seeds", seeds)[0] == 0
    assert run(capsys, "make", "--in", raw, "--out", made, "--backends", "interp",
               "--origin", "FUZZ_PROXY_INTERP")[0] == 0
    assert run(capsys, "distill", "--in", made, "--out", dist)[0] == 0
    (root / "fleet.json").write_text(json.dumps([m.to_json() for m in fleet]))
    (root / "cfg.json").write_text(json.dumps({"batch_size": 20, "list_length": 200, "window_cores": 8}))
    code, out, _ = run(capsys, "check", "--corpus", dist, "--fleet", root / "fleet.json",
                       "--config", root / "cfg.json", "--log", root / "log.jsonl", "--trials", 1)
    return code, json.loads(out)


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_pipeline_is_byte_identical_and_finds_the_fault(capsys, tmp_path):
    fleet = [
        MachineSpec("clean", 8),
        MachineSpec("bad", 8, (FaultProfile("zf", frozenset({6, 7}), Fraction(1), StickyFlag("ZF")),)),
    ]
    code_a, rep_a = _pipeline(capsys, tmp_path / "a", fleet)
    code_b, rep_b = _pipeline(capsys, tmp_path / "b", fleet)
    assert code_a == code_b == 1
    assert rep_a == rep_b
    assert rep_a["defects"] and rep_a["detected_machines"] == ["bad"]
    for sub in ("raw", "made", "dist"):
        assert _tree(tmp_path / "a" / sub) == _tree(tmp_path / "b" / sub)
    assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()
    code, out, _ = run(capsys, "triage", "--log", tmp_path / "a" / "log.jsonl")
    t = json.loads(out)
    assert code == 0 and set(t["defect_map"]["bad"]) <= {"6", "7"}
    assert all(k.startswith("FLAGS:sticky=ZF") for k in t["signature_histogram"])


def test_clean_fleet_exits_zero(capsys, tmp_path):
    code, rep = _pipeline(capsys, tmp_path, [MachineSpec("clean", 4)])
    assert code == 0 and rep["defects"] == [] and rep["detected_machines"] == []


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "corefuzz", "isa", "dump"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout
