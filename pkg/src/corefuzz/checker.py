"""Running a corpus across the cores of simulated (or real) machines.

Snapshots are processed in batches: each batch loads ``batch_size`` snapshots
once and plays ``list_length`` executions drawn from them, spread round-robin
over per-core queues.  Interpreter machines run on a simulated clock (cost
derived from instruction counts), so time-to-failure figures are exact and
independent of the host.
"""

from __future__ import annotations

import json
import math
import random
import statistics
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .backends import (
    ConfigError, FaultBackend, FaultProfile, InterpBackend, check_overlaps, profile_from_json,
    profile_to_json, splitmix64,
)
from .config import CheckConfig
from .player import MismatchCategory, MismatchDetail, Outcome, Player, PlayerSettings, Verdict
from .snapshot import (
    DEFAULT_FLAGS_MASK, Metadata, Snapshot, deserialize, format_flags, parse_flags_mask,
)

QUARANTINE_TAG = "quarantined"


# -- corpus access --------------------------------------------------------------

class CorpusStore:
    """Snapshots addressed by id.  Every ``load`` counts as one disk read."""

    def __init__(self, ids: Sequence[str], loader: Callable[[str], Snapshot]):
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate snapshot ids in corpus")
        self.ids = tuple(sorted(ids))
        self._loader = loader
        self.loads = 0

    @classmethod
    def from_snapshots(cls, snapshots: Iterable[Snapshot]) -> CorpusStore:
        by_id = {s.id: s for s in snapshots}
        return cls(list(by_id), by_id.__getitem__)

    @classmethod
    def from_dir(cls, path: str | Path) -> CorpusStore:
        d = Path(path)
        if not d.is_dir():
            raise FileNotFoundError(f"corpus directory {d} does not exist")
        files = {p.stem: p for p in d.glob("*.snap")}
        return cls(list(files), lambda i: deserialize(files[i].read_bytes()))

    def load(self, snapshot_id: str) -> Snapshot:
        self.loads += 1
        return self._loader(snapshot_id)

    def __len__(self) -> int:
        return len(self.ids)


def _store(corpus: CorpusStore | Iterable[Snapshot]) -> CorpusStore:
    return corpus if isinstance(corpus, CorpusStore) else CorpusStore.from_snapshots(corpus)


# -- machines -------------------------------------------------------------------

@dataclass(frozen=True)
class MachineSpec:
    """A machine of ``num_cores`` logical cores.

    Cores run the clean interpreter, or a fault-injected one when some profile
    lists them, or the host CPU when ``native`` is set.
    """

    machine_id: str
    num_cores: int
    profiles: tuple[FaultProfile, ...] = ()
    fault_seed: int = 0
    native: bool = False
    flags_mask: int = DEFAULT_FLAGS_MASK
    platform_id: str = "interp-v1"

    def __post_init__(self) -> None:
        if not self.machine_id:
            raise ConfigError("machine_id must be non-empty")
        if self.num_cores < 1:
            raise ConfigError(f"{self.machine_id}: num_cores must be >= 1")
        for p in self.profiles:
            bad = sorted(c for c in p.active_cores if not 0 <= c < self.num_cores)
            if bad:
                raise ConfigError(f"{self.machine_id}: profile {p.name!r} names missing cores {bad}")
        check_overlaps(self.profiles)
        if self.native and self.profiles:
            raise ConfigError(f"{self.machine_id}: native machines cannot carry fault profiles")

    @property
    def defective_cores(self) -> frozenset[int]:
        return frozenset(c for p in self.profiles for c in p.active_cores)

    def backend(self, core: int, run_seed: int = 0):
        if self.native:
            from .native import NativeBackend
            return NativeBackend(core, self.flags_mask)
        if core in self.defective_cores:
            seed = splitmix64(self.fault_seed ^ splitmix64(run_seed))
            return FaultBackend(self.profiles, seed, self.platform_id, core, self.flags_mask)
        return InterpBackend(self.platform_id, core, self.flags_mask)

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {"machine_id": self.machine_id, "num_cores": self.num_cores}
        if self.profiles:
            d["profiles"] = [profile_to_json(p) for p in self.profiles]
        if self.fault_seed:
            d["fault_seed"] = self.fault_seed
        if self.native:
            d["native"] = True
        if self.flags_mask != DEFAULT_FLAGS_MASK:
            d["flags_mask"] = format_flags(self.flags_mask)
        return d


_MACHINE_KEYS = {"machine_id", "num_cores", "profiles", "fault_seed", "native", "flags_mask"}


def machine_from_json(d: Any) -> MachineSpec:
    if not isinstance(d, dict):
        raise ConfigError("machine entry must be a JSON object")
    extra = set(d) - _MACHINE_KEYS
    if extra:
        raise ConfigError(f"unknown machine field(s) {sorted(extra)}")
    try:
        mid, n = d["machine_id"], d["num_cores"]
    except KeyError as e:
        raise ConfigError(f"machine missing field {e.args[0]}") from None
    if not isinstance(mid, str) or isinstance(n, bool) or not isinstance(n, int):
        raise ConfigError("machine_id must be a string and num_cores an integer")
    try:
        mask = parse_flags_mask(d.get("flags_mask", "CF|ZF|SF|OF"))
    except (ValueError, AttributeError) as e:
        raise ConfigError(f"{mid}: flags_mask: {e}") from None
    return MachineSpec(
        mid, n, tuple(profile_from_json(p) for p in d.get("profiles", [])),
        int(d.get("fault_seed", 0)), bool(d.get("native", False)), mask,
    )


def load_fleet(path: str | Path) -> list[MachineSpec]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"fleet file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"fleet file is not valid JSON: {e}") from None
    if not isinstance(doc, list) or not doc:
        raise ConfigError("fleet file must be a non-empty JSON list of machines")
    machines = [machine_from_json(m) for m in doc]
    ids = [m.machine_id for m in machines]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate machine ids in fleet")
    return machines


# -- batching -------------------------------------------------------------------

@dataclass(frozen=True)
class ExecutionList:
    batch: tuple[str, ...]
    executions: tuple[tuple[str, int], ...]


def _draw_executions(batch: Sequence[str], length: int, rng: random.Random) -> tuple[tuple[str, int], ...]:
    return tuple((sid, pos) for pos, sid in enumerate(rng.choices(batch, k=length)))


def build_execution_list(
    corpus_ids: Sequence[str], config: CheckConfig, rng: random.Random,
) -> ExecutionList:
    """Draw a batch without replacement, then ``list_length`` executions from it
    uniformly with replacement.  The batch is clamped to the corpus size.
    """
    if not corpus_ids:
        raise ValueError("corpus is empty")
    batch = tuple(rng.sample(sorted(corpus_ids), min(config.batch_size, len(corpus_ids))))
    return ExecutionList(batch, _draw_executions(batch, config.list_length, rng))


def sliding_window_schedule(machine: MachineSpec, config: CheckConfig, invocation: int) -> tuple[int, ...]:
    """Cores tested by the ``invocation``-th run on ``machine``.

    The window advances by its own width each time, wrapping around, so a
    window of w cores covers every core within ceil(n / w) invocations.  A
    window wider than the machine is clamped to all cores.
    """
    n = machine.num_cores
    w = min(config.window_cores, n)
    first = (invocation * w) % n
    return tuple((first + i) % n for i in range(w))


def invocations_to_cover(num_cores: int, window_cores: int) -> int:
    return math.ceil(num_cores / min(window_cores, num_cores))


# -- triage ---------------------------------------------------------------------

def triage_signature(mismatch: MismatchDetail) -> str:
    """Canonical grouping key for a mismatch."""
    c, d = mismatch.category, mismatch.detail
    if c is MismatchCategory.REGISTER:
        return f"REGISTER:{d['register']}:bits={bin(int(d['xor'], 16)).count('1')}"
    if c is MismatchCategory.FLAGS:
        parts = []
        if d["sticky"]:
            parts.append(f"sticky={d['sticky']}")
        if d["cleared"]:
            parts.append(f"cleared={d['cleared']}")
        return "FLAGS:" + ":".join(parts)
    if c is MismatchCategory.END_PC:
        return "END_PC:" + ("overshoot" if d["delta"] > 0 else "undershoot")
    if c is MismatchCategory.MEMORY:
        return f"MEMORY:{d['start']}"
    if c is MismatchCategory.SIGNAL_MISSING:
        return f"SIGNAL_MISSING:{d['expected']}"
    return f"SIGNAL_UNEXPECTED:{d['actual']}"


# -- running --------------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeRecord:
    machine_id: str
    seed: int
    outcome: Outcome
    signature: str | None

    def to_json(self) -> dict[str, Any]:
        o = self.outcome
        return {
            "machine_id": self.machine_id,
            "core_id": o.core_id,
            "snapshot_id": o.snapshot_id,
            "verdict": o.verdict.value,
            "signature": self.signature,
            "cpu_time_ms": round(o.cpu_time_ms, 6),
            "seed": self.seed,
        }


@dataclass
class CheckSummary:
    batches: int = 0
    loads_per_batch: list[int] = field(default_factory=list)
    executions_per_batch: list[int] = field(default_factory=list)
    executions_per_core: dict[int, int] = field(default_factory=dict)
    verdicts: Counter = field(default_factory=Counter)
    # Simulated wall-clock time (cores run in parallel) and total CPU time.
    elapsed_ms: float = 0.0
    cpu_ms: float = 0.0
    # Total CPU time spent before (and including) the first mismatch.
    time_to_failure_ms: float | None = None
    exhausted: bool = False

    @property
    def mean_executions_per_load(self) -> float:
        loads = sum(self.loads_per_batch)
        return sum(self.executions_per_batch) / loads if loads else 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "batches": self.batches,
            "loads_per_batch": self.loads_per_batch,
            "executions_per_batch": self.executions_per_batch,
            "executions_per_core": {str(k): v for k, v in sorted(self.executions_per_core.items())},
            "verdicts": dict(sorted(self.verdicts.items())),
            "elapsed_ms": round(self.elapsed_ms, 6),
            "cpu_ms": round(self.cpu_ms, 6),
            "time_to_failure_ms": self.time_to_failure_ms,
            "exhausted": self.exhausted,
        }


@dataclass
class CheckResult:
    records: list[OutcomeRecord]
    summary: CheckSummary

    @property
    def mismatches(self) -> list[OutcomeRecord]:
        return [r for r in self.records if r.outcome.verdict is Verdict.MISMATCH]


def _next_batch(remaining: list[str], all_ids: Sequence[str], size: int, rng: random.Random) -> list[str]:
    """Take ``size`` not-yet-loaded ids; a short tail is topped up from the rest."""
    if len(remaining) >= size:
        batch = rng.sample(remaining, size)
    else:
        left = set(remaining)
        batch = list(remaining) + rng.sample([i for i in all_ids if i not in left], size - len(remaining))
    taken = set(batch)
    remaining[:] = [i for i in remaining if i not in taken]
    return batch


def run_check(
    machine: MachineSpec,
    corpus: CorpusStore | Iterable[Snapshot],
    config: CheckConfig = CheckConfig(),
    settings: PlayerSettings = PlayerSettings(),
    cores: Sequence[int] | None = None,
    backends: dict[int, Any] | None = None,
    max_batches: int | None = None,
    stop_at_first: bool = False,
) -> CheckResult:
    """One checking run over ``cores`` (default: all) of ``machine``.

    Batches are processed until every snapshot has been loaded once, the
    simulated window ``window_ms`` has elapsed, or ``max_batches`` is reached.
    With ``stop_at_first`` the run also ends after the batch that produced
    the first mismatch.  Pass ``backends`` to keep per-core backend state
    across runs.
    """
    store = _store(corpus)
    if not len(store):
        raise ValueError("corpus is empty")
    cores = tuple(range(machine.num_cores)) if cores is None else tuple(cores)
    if not cores or any(not 0 <= c < machine.num_cores for c in cores):
        raise ValueError(f"cores {cores} not on {machine.machine_id}")
    rng = random.Random(config.rng_seed)
    if backends is None:
        backends = {}
    players = {}
    for c in cores:
        if c not in backends:
            backends[c] = machine.backend(c, config.rng_seed)
        players[c] = Player(backends[c], settings)
    summary = CheckSummary(executions_per_core={c: 0 for c in cores})
    records: list[OutcomeRecord] = []
    size = min(config.batch_size, len(store))
    remaining = list(store.ids)
    # round-robin position carries over so per-core totals stay within one
    turn = 0
    while remaining and summary.elapsed_ms < config.window_ms:
        if max_batches is not None and summary.batches >= max_batches:
            break
        loads_before = store.loads
        batch_ids = _next_batch(remaining, store.ids, size, rng)
        loaded = {sid: store.load(sid) for sid in batch_ids}
        executions = _draw_executions(batch_ids, config.list_length, rng)
        queues: dict[int, list[str]] = {c: [] for c in cores}
        for sid, _ in executions:
            queues[cores[turn % len(cores)]].append(sid)
            turn += 1
        busy: dict[int, list[float]] = {}
        batch_records: list[tuple[float, int, OutcomeRecord]] = []
        for c in cores:
            t = 0.0
            ends = []
            for sid in queues[c]:
                o = players[c].play(loaded[sid])
                t += o.cpu_time_ms
                ends.append(t)
                sig = triage_signature(o.mismatch) if o.mismatch is not None else None
                batch_records.append((t, c, OutcomeRecord(machine.machine_id, config.rng_seed, o, sig)))
                summary.verdicts[o.verdict.value] += 1
            busy[c] = ends
            summary.executions_per_core[c] += len(queues[c])
        if summary.time_to_failure_ms is None:
            hits = [(t, c) for t, c, r in batch_records if r.outcome.verdict is Verdict.MISMATCH]
            if hits:
                t_fail = min(hits)[0]
                # CPU time every core had spent by the moment the first mismatch completed.
                summary.time_to_failure_ms = summary.cpu_ms + sum(
                    min(e[-1], t_fail) if e else 0.0 for e in busy.values()
                )
        # Within a batch, records are ordered by core and then queue position.
        records.extend(r for _, _, r in batch_records)
        summary.cpu_ms += sum(e[-1] for e in busy.values() if e)
        summary.elapsed_ms += max((e[-1] for e in busy.values() if e), default=0.0)
        summary.batches += 1
        summary.loads_per_batch.append(store.loads - loads_before)
        summary.executions_per_batch.append(len(executions))
        if stop_at_first and summary.time_to_failure_ms is not None:
            break
    summary.exhausted = not remaining
    return CheckResult(records, summary)


# -- defects and quarantine -----------------------------------------------------

@dataclass
class DefectRecord:
    machine_id: str
    core_id: int
    snapshot_id: str
    signature: str
    first_seen_ms: float
    occurrences: int = 1
    # Seeds of the independent runs that reproduced the defect.
    reproduced_runs: set[int] = field(default_factory=set)

    def to_json(self) -> dict[str, Any]:
        return {
            "machine_id": self.machine_id,
            "core_id": self.core_id,
            "snapshot_id": self.snapshot_id,
            "signature": self.signature,
            "first_seen_ms": round(self.first_seen_ms, 6),
            "occurrences": self.occurrences,
            "reproduced_runs": sorted(self.reproduced_runs),
        }


def collect_defects(
    records: Iterable[OutcomeRecord], into: dict[tuple, DefectRecord] | None = None,
    time_offset_ms: float = 0.0,
) -> dict[tuple, DefectRecord]:
    """Group MISMATCH records by (machine, core, snapshot, signature)."""
    out = {} if into is None else into
    t = time_offset_ms
    for r in records:
        t += r.outcome.cpu_time_ms
        if r.outcome.verdict is not Verdict.MISMATCH:
            continue
        key = (r.machine_id, r.outcome.core_id, r.outcome.snapshot_id, r.signature)
        d = out.get(key)
        if d is None:
            out[key] = DefectRecord(*key, first_seen_ms=t, reproduced_runs={r.seed})
        else:
            d.occurrences += 1
            d.reproduced_runs.add(r.seed)
    return out


def quarantine_update(corpus: Sequence[Snapshot], defects: Iterable[DefectRecord]) -> list[Snapshot]:
    """Tag every snapshot that detected a defect as quarantined.

    Tagging changes the snapshot id; the previous id is kept as a parent.
    Already-quarantined snapshots are left unchanged.
    """
    hit = {d.snapshot_id for d in defects}
    out = []
    for s in corpus:
        if s.id in hit and not s.quarantined:
            m = s.metadata
            meta = Metadata(m.origin, m.parents + (s.id,), m.notes, m.tags + (QUARANTINE_TAG,))
            s = replace(s, metadata=meta).with_id()
        out.append(s)
    return out


# -- fleets ---------------------------------------------------------------------

def sibling(core: int) -> int:
    """The other logical core of the same physical core (pairs 0-1, 2-3, ...)."""
    return core ^ 1


def is_single_sibling_pair(cores: Iterable[int]) -> bool:
    cs = set(cores)
    return len(cs) == 2 and sibling(min(cs)) == max(cs)


@dataclass
class FleetReport:
    trials: int
    machines: dict[str, dict[str, Any]] = field(default_factory=dict)
    time_to_failure_ms: list[float] = field(default_factory=list)
    defect_map: dict[str, dict[int, list[str]]] = field(default_factory=dict)
    signature_histogram: Counter = field(default_factory=Counter)
    defects: list[DefectRecord] = field(default_factory=list)

    @property
    def detected_machines(self) -> list[str]:
        return sorted(m for m, v in self.machines.items() if v["detected"])

    @property
    def single_pair_fraction(self) -> float | None:
        det = self.detected_machines
        if not det:
            return None
        return sum(is_single_sibling_pair(self.defect_map[m]) for m in det) / len(det)

    def ttf_stats(self) -> dict[str, float] | None:
        t = self.time_to_failure_ms
        if not t:
            return None
        return {"min": min(t), "median": statistics.median(t), "max": max(t), "count": len(t)}

    def to_json(self) -> dict[str, Any]:
        return {
            "trials": self.trials,
            "machines": self.machines,
            "detected_machines": self.detected_machines,
            "time_to_failure_ms": [round(t, 6) for t in self.time_to_failure_ms],
            "time_to_failure_stats": self.ttf_stats(),
            "defect_map": {
                m: {str(c): sigs for c, sigs in sorted(cores.items())}
                for m, cores in sorted(self.defect_map.items())
            },
            "signature_histogram": dict(sorted(self.signature_histogram.items())),
            "single_sibling_pair_fraction": self.single_pair_fraction,
            "defects": [d.to_json() for d in self.defects],
        }


def trial_seed(base: int, trial: int, invocation: int) -> int:
    return splitmix64(splitmix64(base ^ trial) ^ invocation) & 0xFFFFFFFF


def fleet_simulate(
    machines: Sequence[MachineSpec],
    corpus: CorpusStore | Iterable[Snapshot],
    config: CheckConfig = CheckConfig(),
    trials: int = 1,
    settings: PlayerSettings = PlayerSettings(),
    invocations: int | None = None,
    stop_at_first: bool = False,
    sink: Callable[[OutcomeRecord], None] | None = None,
) -> FleetReport:
    """Screen every machine ``trials`` times with sliding core windows.

    A trial runs ``invocations`` checking runs (default: enough windows to
    cover every core once), each with its own derived seed; backend state
    persists across the runs of a trial.  Time-to-failure is the machine's
    cumulative test CPU time before its first mismatch in that trial.
    """
    if not machines:
        raise ValueError("need at least one machine")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    store = _store(corpus)
    report = FleetReport(trials)
    defects: dict[tuple, DefectRecord] = {}
    for m in machines:
        n_inv = invocations if invocations is not None else invocations_to_cover(m.num_cores, config.window_cores)
        ttfs: list[float | None] = []
        for trial in range(trials):
            backends: dict[int, Any] = {}
            spent = 0.0
            ttf = None
            for k in range(n_inv):
                cfg = replace(config, rng_seed=trial_seed(config.rng_seed, trial, k))
                cores = sliding_window_schedule(m, config, k)
                res = run_check(m, store, cfg, settings, cores, backends, stop_at_first=stop_at_first)
                if sink is not None:
                    for r in res.records:
                        sink(r)
                collect_defects(res.records, defects, spent)
                if ttf is None and res.summary.time_to_failure_ms is not None:
                    ttf = spent + res.summary.time_to_failure_ms
                spent += res.summary.cpu_ms
                if stop_at_first and ttf is not None:
                    break
            for b in backends.values():
                close = getattr(b, "close", None)
                if close is not None:
                    close()
            ttfs.append(ttf)
            if ttf is not None:
                report.time_to_failure_ms.append(ttf)
        report.machines[m.machine_id] = {
            "detected": any(t is not None for t in ttfs),
            "detections": sum(t is not None for t in ttfs),
            "time_to_failure_ms": [None if t is None else round(t, 6) for t in ttfs],
        }
    for d in sorted(defects.values(), key=lambda d: (d.machine_id, d.core_id, d.snapshot_id, d.signature)):
        report.defects.append(d)
        cores = report.defect_map.setdefault(d.machine_id, {})
        sigs = cores.setdefault(d.core_id, [])
        if d.signature not in sigs:
            sigs.append(d.signature)
        report.signature_histogram[d.signature] += d.occurrences
    for cores in report.defect_map.values():
        for sigs in cores.values():
            sigs.sort()
    return report


def triage_log(lines: Iterable[str]) -> dict[str, Any]:
    """Signature histogram and per-core defect map from an outcome log."""
    hist: Counter = Counter()
    cores: dict[str, dict[str, set[str]]] = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            r = json.loads(line)
            if r["verdict"] != Verdict.MISMATCH.value:
                continue
            sig, mid, core = r["signature"], r["machine_id"], r["core_id"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"log line {n}: {e}") from None
        hist[sig] += 1
        cores.setdefault(mid, {}).setdefault(str(core), set()).add(sig)
    return {
        "signature_histogram": dict(sorted(hist.items())),
        "defect_map": {
            m: {c: sorted(s) for c, s in sorted(cs.items(), key=lambda kv: int(kv[0]))}
            for m, cs in sorted(cores.items())
        },
    }
