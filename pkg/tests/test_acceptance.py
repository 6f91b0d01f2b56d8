"""Acceptance criteria 1-10.

Each test measures its own runtime, records one PASS/FAIL line (printed in
the terminal summary) and then asserts the criterion at its stated bound.
"""

import itertools
import json
import random
import time
from collections import Counter
from fractions import Fraction
from functools import lru_cache

import pytest

from builders import case_snapshot, code_snapshot, flags_grid, nop_snapshot, random_corpus
from conftest import NATIVE_OK, NATIVE_WHY, record_acceptance
from corefuzz.backends import (
    BitFlipResult, FaultProfile, IllegalOvershoot, InterpBackend, StickyFlag,
)
from corefuzz.checker import MachineSpec, fleet_simulate, run_check
from corefuzz.cli import main
from corefuzz.config import CheckConfig
from corefuzz.fuzz import (
    CorpusEntry, FuzzConfig, Proxy, build_dictionary, distill, fuzz_loop, run_proxy, union_coverage,
)
from corefuzz.isa import DecodeError, DecodeErrorKind, Mem, Op, Reg, decode_one, encode, enumerate_instrs, make_instr
from corefuzz.isa.gen import gen_random_program
from corefuzz.isa.interp import ExecutionTimeout
from corefuzz.maker import MakerConfig, make_corpus, record_end_states, verify_determinism
from corefuzz.player import ExecCmd, Player, Verdict, play
from corefuzz.snapshot import Origin, Signal, serialize

pytestmark = pytest.mark.slow


class Criterion:
    """Times a criterion and records its verdict line."""

    def __init__(self, n, title, limit_s):
        self.n, self.title, self.limit_s = n, title, limit_s
        self.checks: list[tuple[str, bool]] = []
        self.t0 = time.perf_counter()

    def check(self, name, ok):
        self.checks.append((name, bool(ok)))
        return bool(ok)

    def finish(self, detail="", timed_s=None):
        """``timed_s`` is the part of the run the time bound applies to (default: all of it)."""
        elapsed = time.perf_counter() - self.t0
        timed = elapsed if timed_s is None else timed_s
        self.check(f"runtime {timed:.1f}s < {self.limit_s}s", timed < self.limit_s)
        failed = [name for name, ok in self.checks if not ok]
        verdict = "FAIL" if failed else "PASS"
        line = f"{verdict} criterion {self.n:>2} {self.title}: {detail} ({elapsed:.1f}s)"
        if failed:
            line += " failed: " + "; ".join(failed)
        record_acceptance(self.n, line)
        print(line)
        assert not failed, line


# -- shared recipes ---------------------------------------------------------------

FAULTS = (
    FaultProfile("overshoot", frozenset({2, 3}), Fraction(1), IllegalOvershoot(2)),
    FaultProfile("mul-flip", frozenset({4, 5}), Fraction(1), BitFlipResult(Op.MUL, 23, 23)),
    FaultProfile("sticky-zf", frozenset({6, 7}), Fraction(1), StickyFlag("ZF")),
)
EXPECTED_SIGNATURE = {
    "overshoot": "SIGNAL_MISSING:ILL",
    "mul-flip": "REGISTER:rax:bits=1",
    "sticky-zf": "FLAGS:sticky=ZF",
}
FAULT_MACHINE = MachineSpec("m-faulty", 8, FAULTS)


def seeded_fuzz(seed, budget, max_instrs=16):
    """Coverage-guided fuzzing of the interpreter, seeded with 100 generated
    programs and a dictionary cut from them (so UD2 and MUL are reachable).
    The seed executions count against ``budget``."""
    samples = [gen_random_program(seed * 1_000_003 + s, max_instrs) for s in range(100)]
    cfg = FuzzConfig(seed, budget - len(samples), seed_corpus=tuple(samples),
                     dictionary=tuple(build_dictionary(samples)))
    return fuzz_loop(cfg)


def make_from_entries(entries, origin):
    return make_corpus([(e.id, e.data) for e in entries], [InterpBackend()], MakerConfig(), origin).kept


@lru_cache(maxsize=None)
def fuzz_made_corpus(seed=0, budget=3000):
    res = seeded_fuzz(seed, budget)
    return tuple(make_from_entries(distill(res.corpus), Origin.FUZZ_PROXY_INTERP))


def signatures_by_core(records):
    out: dict[int, Counter] = {}
    for r in records:
        if r.outcome.verdict is Verdict.MISMATCH:
            out.setdefault(r.outcome.core_id, Counter())[r.signature] += 1
    return out


def faults_detected(by_core):
    """Profiles with at least one mismatch on one of their cores."""
    return {p.name for p in FAULTS if any(c in by_core for c in p.active_cores)}


# -- criteria ---------------------------------------------------------------------

def test_c01_player_command_listing(tmp_path, capsys):
    c = Criterion(1, "NOP snapshot command listing", 1)
    snap = tmp_path / "nop.snap"
    snap.write_bytes(serialize(nop_snapshot()))
    code = main(["play", "--snapshot", str(snap), "--backend", "interp", "--dump-commands", "--checksum-all"])
    cmds = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    c.check("exit 0", code == 0)
    c.check("five commands", len(cmds) == 5)
    expected_regs = nop_snapshot().registers.to_json()
    c.check("rip 0x10000000", expected_regs["rip"] == "0x10000000")
    expected = [
        {"command": "MapMemory", "start": "0x10000000", "num_bytes": 4096},
        {"command": "WriteMemory", "start": "0x10000000", "data": (b"\x90\xcc" + bytes(4094)).hex(),
         "num_bytes": 4096},
        {"command": "ProtectMemory", "start": "0x10000000", "perms": "r-x"},
        {"command": "ExecuteSnapshot", "registers": expected_regs, "cpu_time_limit_ms": 3000},
        {"command": "ChecksumMemory", "start": "0x10000000", "num_bytes": 4096},
    ]
    for i, (got, want) in enumerate(zip(cmds, expected)):
        c.check(f"command {i + 1} {want['command']}", got == want)
    c.finish(" -> ".join(x["command"] for x in cmds))


def test_c02_decoder_contract():
    c = Criterion(2, "decoder round trip, length bound, TOO_LONG", 10)
    model = list(enumerate_instrs())
    bad = 0
    for ins in model:
        try:
            back = decode_one(ins.raw)
            ok = back == ins and encode(back) == ins.raw
        except DecodeError:
            ok = False
        bad += not ok
    c.check("exhaustive round trip", bad == 0)
    c.check("all opcodes enumerated", {i.opcode for i in model} == set(Op))

    class Probe:
        def __init__(self, data):
            self.data, self.max_index = data, -1

        def __len__(self):
            return len(self.data)

        def __getitem__(self, i):
            self.max_index = max(self.max_index, i)
            return self.data[i]

    rng = random.Random(2)
    deepest = -1
    for _ in range(20_000):
        p = Probe(bytes(rng.getrandbits(8) for _ in range(rng.randrange(1, 32))))
        try:
            decode_one(p)
        except DecodeError:
            pass
        deepest = max(deepest, p.max_index)
    for ins in model[::7]:
        p = Probe(ins.raw + bytes(16))
        decode_one(p)
        deepest = max(deepest, p.max_index)
    c.check("no read past byte 14", deepest <= 14)
    p = Probe(b"\x66" * 15 + b"\x90")
    try:
        decode_one(p)
        kind = None
    except DecodeError as e:
        kind = e.kind
    c.check("15 prefixes -> TOO_LONG", kind is DecodeErrorKind.TOO_LONG and p.max_index == 14)
    c.finish(f"{len(model)} encodings, {bad} failures, deepest read index {deepest}")


def test_c03_determinism():
    c = Criterion(3, "replay determinism and native flags grid", 60)
    corpus = random_corpus(1100)
    c.check("at least 1000 made snapshots", len(corpus) >= 1000)
    snaps = corpus[:1000]
    backend = InterpBackend()
    nondet = sum(not verify_determinism(s, backend, replays=8) for s in snaps)
    unmatched = sum(play(backend, s).verdict is not Verdict.MATCH for s in snaps)
    c.check("8 identical replays each", nondet == 0)
    c.check("replays match recorded end state", unmatched == 0)
    interp_s = time.perf_counter() - c.t0
    detail = f"{len(snaps)} snapshots x8, {nondet} nondeterministic, interpreter part {interp_s:.1f}s"
    if NATIVE_OK:
        from corefuzz.native import NativeBackend

        nb = NativeBackend(0)
        try:
            grid = flags_grid()
            diff = sum(play(nb, case_snapshot(g)).verdict is not Verdict.MATCH for g in grid)
        finally:
            nb.close()
        c.check("native flags grid", diff == 0)
        detail += f"; native grid {len(grid) - diff}/{len(grid)} match"
    else:
        detail += f"; native grid skipped ({NATIVE_WHY})"
    # the time bound covers the interpreter part
    c.finish(detail, timed_s=interp_s)


def test_c04_batching_arithmetic():
    c = Criterion(4, "batching arithmetic on 8 cores", 30)
    corpus = random_corpus(120)[:100]
    res = run_check(MachineSpec("m8", 8), corpus, CheckConfig(rng_seed=4), max_batches=1)
    s = res.summary
    counts = list(s.executions_per_core.values())
    c.check("loads per batch 50", s.loads_per_batch == [50])
    c.check("executions per batch 1000", s.executions_per_batch == [1000])
    c.check("mean executions per load exactly 20", s.mean_executions_per_load == 20)
    c.check("per-core counts within 1", len(counts) == 8 and max(counts) - min(counts) <= 1)
    c.finish(f"loads {s.loads_per_batch[0]}, executions {s.executions_per_batch[0]}, "
             f"mean {s.mean_executions_per_load}, per core {sorted(set(counts))}")


def test_c05_fault_detection():
    c = Criterion(5, "seeded fault machine detection", 120)
    corpus = fuzz_made_corpus(0, 3000)
    c.check(">= 200 made snapshots", len(corpus) >= 200)
    res = run_check(FAULT_MACHINE, corpus, CheckConfig(rng_seed=0))
    c.check("one check window", res.summary.elapsed_ms <= CheckConfig().window_ms)
    by_core = signatures_by_core(res.records)
    faulty = set().union(*(p.active_cores for p in FAULTS))
    c.check("no mismatch on cores 0,1", not ({0, 1} & set(by_core)))
    c.check("every mismatch on a faulty core", set(by_core) <= faulty)
    for p in FAULTS:
        sig = EXPECTED_SIGNATURE[p.name]
        with_sig = {core for core, sigs in by_core.items() if sigs.get(sig)}
        c.check(f"{sig} on cores {sorted(p.active_cores)} only", with_sig == p.active_cores)
    again = run_check(FAULT_MACHINE, corpus, CheckConfig(rng_seed=0))
    c.check("deterministic", [r.to_json() for r in again.records] == [r.to_json() for r in res.records])
    detail = ", ".join(
        f"cores {sorted(p.active_cores)}: {sum(sum(by_core.get(k, Counter()).values()) for k in p.active_cores)} mismatches"
        for p in FAULTS
    )
    c.finish(f"{len(corpus)} snapshots; {detail}")


def test_c06_flaky_time_to_failure():
    c = Criterion(6, "flaky defect time-to-failure", 300)
    corpus = fuzz_made_corpus(0, 3000)
    m = MachineSpec("m-flaky", 8, (FaultProfile("zf", frozenset({6, 7}), Fraction(1, 100), StickyFlag("ZF")),))
    # Budget per trial: three checking runs over all eight cores.
    report = fleet_simulate([m], corpus, CheckConfig(window_cores=8), trials=100, invocations=3,
                            stop_at_first=True)
    detections = report.machines[m.machine_id]["detections"]
    t = report.ttf_stats() or {"min": 0, "median": 0, "max": 0}
    c.check(">= 95 of 100 trials detect", detections >= 95)
    c.check("min < median < max", t["min"] < t["median"] < t["max"])
    c.finish(f"{detections}/100 detected; ttf ms min {t['min']:.2f} median {t['median']:.2f} max {t['max']:.2f}")


def _random_entries(seed, budget, max_instrs):
    entries = []
    for s in range(budget):
        data = gen_random_program(seed * 7919 + 10**9 + s, max_instrs)
        try:
            cov, cost = run_proxy(data, Proxy.INTERPRETER)
        except ExecutionTimeout:
            continue
        entries.append(CorpusEntry(data, cov, cost, Origin.RANDOM_GEN))
    return entries


def _signatures(records):
    return {r.signature for r in records if r.outcome.verdict is Verdict.MISMATCH}


def test_c07_guided_vs_random():
    c = Criterion(7, "coverage-guided vs random at equal budget", 300)
    budget, max_instrs = 50_000, 12
    wins, rows = 0, []
    pair0 = None
    for seed in range(10):
        fz = seeded_fuzz(seed, budget, max_instrs)
        guided = distill(fz.corpus)
        # random baseline: same executions, trimmed to the same corpus size
        # keeping its most covering entries
        rand = distill(_random_entries(seed, budget, max_instrs))[:len(guided)]
        g, r = len(union_coverage(guided)), len(union_coverage(rand))
        wins += g >= r
        rows.append(f"{g}/{r}")
        if seed == 0:
            pair0 = (guided, rand)
    c.check(">= 8 of 10 pairs guided >= random", wins >= 8)

    guided, rand = pair0
    made_g = make_from_entries(guided, Origin.FUZZ_PROXY_INTERP)
    made_r = make_from_entries(rand, Origin.RANDOM_GEN)
    cfg = CheckConfig(rng_seed=7)
    rec_g = run_check(FAULT_MACHINE, made_g, cfg).records
    rec_r = run_check(FAULT_MACHINE, made_r, cfg).records
    rec_u = run_check(FAULT_MACHINE, {s.id: s for s in made_g + made_r}.values(), cfg).records
    det_g, det_r = faults_detected(signatures_by_core(rec_g)), faults_detected(signatures_by_core(rec_r))
    all_faults = {p.name for p in FAULTS}
    c.check("guided corpus detects the fault machine", det_g == all_faults)
    c.check("random corpus detects the fault machine", det_r == all_faults)
    sg, sr, su = _signatures(rec_g), _signatures(rec_r), _signatures(rec_u)
    c.check("union signatures cover both", su >= sg | sr)
    c.finish(f"guided>=random in {wins}/10 (guided/random union coverage {' '.join(rows)}); "
             f"pair 0 detects guided {sorted(det_g)} random {sorted(det_r)}; "
             f"signatures guided {len(sg)} random {len(sr)} union {len(su)}")


def _min_cover_size(corpus):
    target = union_coverage(corpus)
    for k in range(len(corpus) + 1):
        for combo in itertools.combinations(corpus, k):
            if union_coverage(combo) == target:
                return k
    raise AssertionError("unreachable")


def test_c08_distillation():
    c = Criterion(8, "distillation", 60)
    rng = random.Random(8)
    lost = kept_q = brute_bad = 0
    for i in range(100):
        # half the corpora are small enough for the brute-force oracle
        n = rng.randrange(1, 16) if i < 50 else rng.randrange(16, 200)
        universe = range(rng.randrange(4, 120))
        corpus = []
        for k in range(n):
            cov = frozenset(rng.sample(universe, rng.randrange(0, min(12, len(universe)))))
            corpus.append(CorpusEntry(bytes([i, k]), cov, rng.randrange(1, 50), quarantined=rng.random() < 0.1))
        out = distill(corpus)
        lost += union_coverage(out) != union_coverage(corpus)
        kept_q += not ({e.id for e in corpus if e.quarantined} <= {e.id for e in out})
        if n <= 15:
            plain = [CorpusEntry(e.data, e.coverage, e.exec_cost) for e in corpus]
            greedy = distill(plain)
            brute_bad += union_coverage(greedy) != union_coverage(plain) or len(greedy) < _min_cover_size(plain)
    c.check("coverage preserved on 100 corpora", lost == 0)
    c.check("quarantined entries retained", kept_q == 0)
    c.check("greedy coverage equals brute-force cover", brute_bad == 0)
    base = [CorpusEntry(bytes([k]), frozenset(rng.sample(range(300), 8)), 1) for k in range(40)]
    dup = [CorpusEntry(e.data + bytes([k]), e.coverage, e.exec_cost) for e in base for k in range(10)]
    shrunk = distill(dup)
    c.check("10x duplicated corpus shrinks >= 10x", len(shrunk) * 10 <= len(dup))
    c.finish(f"100 corpora, {lost} coverage losses, {kept_q} quarantine losses, "
             f"{brute_bad} brute-force disagreements; {len(dup)} -> {len(shrunk)}")


def test_c09_native_player():
    if not NATIVE_OK:
        record_acceptance(9, f"SKIP criterion  9 native player: {NATIVE_WHY}")
        pytest.skip(NATIVE_WHY)
    from corefuzz.native import NativeBackend

    c = Criterion(9, "native player", 60)
    nb = NativeBackend(0)
    try:
        c.check("NOP matches", play(nb, nop_snapshot()).verdict is Verdict.MATCH)
        grid = flags_grid()
        diff = sum(play(nb, case_snapshot(g)).verdict is not Verdict.MATCH for g in grid)
        c.check("flags grid matches", diff == 0)
        load = make_instr(Op.MOV_RM, (Reg(0), Mem(3))).raw
        s, _ = record_end_states(code_snapshot(load, rbx=0x7654321008), [InterpBackend()])
        raw = nb.execute(s)
        c.check("unmapped page SEGV at the address",
                (raw.signal.signal, raw.signal.fault_address) == (Signal.SEGV, 0x7654321008))
    finally:
        nb.close()
    armed = {"on": False}

    def crash(h, cmd):
        if isinstance(cmd, ExecCmd) and armed["on"]:
            armed["on"] = False
            h.kill()

    cb = NativeBackend(0, crash_hook=crash)
    p = Player(cb)
    survived = 0
    try:
        for _ in range(1000):
            armed["on"] = True
            survived += p.play(nop_snapshot()).verdict is Verdict.MATCH
    finally:
        cb.close()
    c.check("driver survives 1000 crash injections", survived == 1000)
    c.finish(f"grid {len(grid) - diff}/{len(grid)} match; {survived}/1000 plays recovered after a harness kill")


def test_c10_multi_state_filter():
    c = Criterion(10, "multi-state filter", 10)
    code = make_instr(Op.XOR_MR, (Reg(0), Reg(0))).raw
    a = InterpBackend("plat-a", flags_mask=0x8C1)
    b = InterpBackend("plat-b", flags_mask=0x801)
    res = make_corpus([("divergent", code), ("nop", b"\x90")], [a, b])
    c.check("single-state snapshot kept", [s.metadata.notes for s in res.kept] == ["nop"])
    c.check("divergent snapshot discarded", len(res.discarded) == 1)
    if res.discarded:
        s, reason = res.discarded[0]
        c.check("two end states", reason == "2 end states" and len(s.end_states) == 2)
        _, report = record_end_states(s, [a, b])
        c.check("MultiStateReport has two states", report.multi_state and len(report.platforms_per_state) == 2)
    c.finish(f"kept {len(res.kept)}, discarded {len(res.discarded)} ({res.discarded[0][1] if res.discarded else '-'})")
