import json
import random
from collections import Counter
from fractions import Fraction

import pytest
from scipy.stats import chisquare, kstest

from builders import random_corpus
from corefuzz.backends import (
    BitFlipResult, ConfigError, FaultBackend, FaultProfile, IllegalOvershoot, InterpBackend,
    StickyFlag,
)
from corefuzz.checker import (
    CorpusStore, MachineSpec, build_execution_list, collect_defects, fleet_simulate,
    invocations_to_cover, is_single_sibling_pair, load_fleet, machine_from_json,
    quarantine_update, run_check, sibling, sliding_window_schedule, triage_log,
)
from corefuzz.config import CheckConfig
from corefuzz.isa import Op
from corefuzz.player import Verdict
from corefuzz.snapshot import serialize

SMALL = CheckConfig(batch_size=10, list_length=60, window_cores=4)


@pytest.fixture(scope="module")
def corpus():
    return random_corpus(120)


def sticky(cores, p=1, name="zf"):
    return FaultProfile(name, frozenset(cores), Fraction(p), StickyFlag("ZF"))


def test_execution_list_shape():
    ids = [f"s{i:03d}" for i in range(80)]
    el = build_execution_list(ids, CheckConfig(), random.Random(0))
    assert len(el.batch) == 50 == len(set(el.batch))
    assert len(el.executions) == 1000
    assert {sid for sid, _ in el.executions} <= set(el.batch)
    assert len(build_execution_list(ids[:7], CheckConfig(), random.Random(0)).batch) == 7


def test_execution_lists_are_uniform_over_seeds():
    ids = [f"s{i:03d}" for i in range(200)]
    pvalues = []
    for seed in range(100):
        el = build_execution_list(ids, CheckConfig(), random.Random(seed))
        counts = Counter(sid for sid, _ in el.executions)
        pvalues.append(chisquare([counts[s] for s in el.batch]).pvalue)
    rejected = sum(p < 0.01 for p in pvalues)
    # Under uniformity rejections are Binomial(100, 0.01); more than 5 has p < 0.001.
    assert rejected <= 5
    assert kstest(pvalues, "uniform").pvalue > 0.001


def test_batch_accounting(corpus):
    store = CorpusStore.from_snapshots(corpus)
    m = MachineSpec("m", 8)
    res = run_check(m, store, CheckConfig(batch_size=20, list_length=100), max_batches=3)
    s = res.summary
    assert s.batches == 3
    assert s.loads_per_batch == [20, 20, 20]
    assert s.executions_per_batch == [100, 100, 100]
    assert s.mean_executions_per_load == 5
    counts = list(s.executions_per_core.values())
    assert max(counts) - min(counts) <= 1 and sum(counts) == 300


def test_run_exhausts_corpus_and_loads_each_snapshot_once(corpus):
    store = CorpusStore.from_snapshots(corpus[:35])
    res = run_check(MachineSpec("m", 2), store, CheckConfig(batch_size=10, list_length=20))
    s = res.summary
    assert s.exhausted and s.batches == 4
    # the short last batch is topped up with already-seen snapshots
    assert s.loads_per_batch == [10, 10, 10, 10]


def test_window_limits_the_run(corpus):
    res = run_check(MachineSpec("m", 2), corpus, CheckConfig(batch_size=10, list_length=20, window_ms=0.5))
    assert res.summary.batches == 1 and not res.summary.exhausted


def test_clean_machine_has_no_false_positives(corpus):
    m = MachineSpec("clean", 4)
    for seed in range(100):
        res = run_check(m, corpus, CheckConfig(batch_size=5, list_length=20, rng_seed=seed), max_batches=1)
        assert not res.mismatches
        assert res.summary.time_to_failure_ms is None


def test_clean_fleet_has_no_detections(corpus):
    fleet = [MachineSpec(f"m{i}", 4) for i in range(10)]
    report = fleet_simulate(fleet, corpus[:20], CheckConfig(batch_size=10, list_length=20, window_cores=4))
    assert report.detected_machines == [] and report.defects == []


def test_deterministic_pair_fault_is_localized(corpus):
    fleet = [MachineSpec(f"m{i}", 8) for i in range(5)]
    fleet[3] = MachineSpec("m3", 8, (sticky({4, 5}),))
    report = fleet_simulate(fleet, corpus, SMALL)
    assert report.detected_machines == ["m3"]
    assert set(report.defect_map["m3"]) == {4, 5}
    assert report.single_pair_fraction == 1.0
    assert all(d.signature.startswith("FLAGS:sticky=ZF") for d in report.defects)


def test_attribution_soundness(corpus):
    profiles = (
        sticky({1}),
        FaultProfile("ovs", frozenset({2, 3}), Fraction(1, 2), IllegalOvershoot(2)),
        FaultProfile("flip", frozenset({6}), Fraction(1, 3), BitFlipResult(Op.ADD_MR, 5)),
    )
    m = MachineSpec("m", 8, profiles, fault_seed=4)
    allowed = set().union(*(p.active_cores for p in profiles))
    for seed in range(5):
        res = run_check(m, corpus, CheckConfig(batch_size=20, list_length=200, rng_seed=seed), max_batches=2)
        assert res.mismatches
        assert {r.outcome.core_id for r in res.mismatches} <= allowed


def test_signatures_are_stable_across_runs(corpus):
    m = MachineSpec("m", 4, (sticky({0, 1}, p=Fraction(1, 5)),), fault_seed=9)
    cfg = CheckConfig(batch_size=20, list_length=100, rng_seed=3)

    def sigs():
        return [(r.outcome.snapshot_id, r.outcome.core_id, r.signature) for r in run_check(m, corpus, cfg).records]

    assert sigs() == sigs()


def test_time_to_failure(corpus):
    m = MachineSpec("m", 2, (sticky({1}),))
    res = run_check(m, corpus, CheckConfig(batch_size=10, list_length=40))
    ttf = res.summary.time_to_failure_ms
    assert ttf is not None and 0 < ttf <= res.summary.cpu_ms


def test_flaky_fault_gives_spread_time_to_failure(corpus):
    m = MachineSpec("m", 2, (sticky({0, 1}, p=Fraction(1, 20)),))
    report = fleet_simulate([m], corpus, CheckConfig(batch_size=10, list_length=40), trials=20,
                            stop_at_first=True)
    t = report.ttf_stats()
    assert t["count"] >= 18
    assert t["min"] < t["median"] < t["max"]


def test_sliding_window():
    m = MachineSpec("m", 10)
    cfg = CheckConfig(window_cores=4)
    windows = [sliding_window_schedule(m, cfg, k) for k in range(invocations_to_cover(10, 4))]
    assert windows[0] == (0, 1, 2, 3) and windows[2] == (8, 9, 0, 1)
    assert set().union(*windows) == set(range(10))
    assert sliding_window_schedule(MachineSpec("s", 2), cfg, 5) == (0, 1)


def test_siblings():
    assert [sibling(c) for c in range(4)] == [1, 0, 3, 2]
    assert is_single_sibling_pair({4, 5})
    assert not is_single_sibling_pair({5, 6})
    assert not is_single_sibling_pair({4})


def test_machine_backends(corpus):
    m = MachineSpec("m", 4, (sticky({2}),))
    assert type(m.backend(0)) is InterpBackend
    assert isinstance(m.backend(2), FaultBackend)
    assert m.backend(2, 1).seed != m.backend(2, 2).seed


@pytest.mark.parametrize("doc, needle", [
    ({"machine_id": "a", "num_cores": 0}, "num_cores"),
    ({"machine_id": "a", "num_cores": 2, "extra": 1}, "unknown machine field"),
    ({"num_cores": 2}, "missing field"),
    ({"machine_id": "a", "num_cores": 2, "profiles": [
        {"name": "z", "active_cores": [5], "activation_probability": 1,
         "effect": {"type": "STICKY_FLAG", "flag": "ZF"}}]}, "missing cores"),
    ({"machine_id": "a", "num_cores": 2, "native": True, "profiles": [
        {"name": "z", "active_cores": [1], "activation_probability": 1,
         "effect": {"type": "STICKY_FLAG", "flag": "ZF"}}]}, "native"),
])
def test_bad_machines(doc, needle):
    with pytest.raises(ConfigError) as e:
        machine_from_json(doc)
    assert needle in str(e.value)


def test_fleet_file(tmp_path):
    m = MachineSpec("m3", 8, (sticky({4, 5}),), fault_seed=2)
    f = tmp_path / "fleet.json"
    f.write_text(json.dumps([m.to_json(), MachineSpec("m4", 2).to_json()]))
    assert load_fleet(f) == [m, MachineSpec("m4", 2)]
    f.write_text(json.dumps([m.to_json(), m.to_json()]))
    with pytest.raises(ConfigError):
        load_fleet(f)
    with pytest.raises(ConfigError):
        load_fleet(tmp_path / "missing.json")


def test_corpus_store_from_dir(tmp_path, corpus):
    for s in corpus[:5]:
        (tmp_path / f"{s.id}.snap").write_bytes(serialize(s))
    store = CorpusStore.from_dir(tmp_path)
    assert len(store) == 5
    assert store.load(corpus[0].id) == corpus[0] and store.loads == 1


def test_defects_and_quarantine(corpus):
    m = MachineSpec("m", 2, (sticky({0, 1}),))
    res = run_check(m, corpus, CheckConfig(batch_size=10, list_length=40))
    defects = collect_defects(res.records)
    assert defects
    hit = {d.snapshot_id for d in defects.values()}
    updated = quarantine_update(list(corpus), defects.values())
    q = [s for s in updated if s.quarantined]
    assert len(q) == len(hit)
    assert all(s.metadata.parents[-1] in hit or set(s.metadata.parents) & hit for s in q)
    assert quarantine_update(updated, defects.values()) == updated


def test_outcome_log_and_triage(corpus):
    m = MachineSpec("m", 4, (sticky({2, 3}),))
    lines = []
    fleet_simulate([m], corpus, SMALL, sink=lambda r: lines.append(json.dumps(r.to_json())))
    rec = json.loads(lines[0])
    assert set(rec) == {"machine_id", "core_id", "snapshot_id", "verdict", "signature", "cpu_time_ms", "seed"}
    t = triage_log(lines)
    assert set(t["defect_map"]["m"]) == {"2", "3"}
    assert sum(t["signature_histogram"].values()) == sum(json.loads(x)["verdict"] == "MISMATCH" for x in lines)
    with pytest.raises(ValueError):
        triage_log(["{}"])


def test_records_verdicts_are_counted(corpus):
    res = run_check(MachineSpec("m", 2), corpus, SMALL, max_batches=1)
    assert res.summary.verdicts == Counter({Verdict.MATCH.value: 60})
