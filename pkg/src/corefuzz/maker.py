"""Turning raw instruction bytes into snapshots with recorded end states."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .backends import ExecutionTimeout, Limits, RawEndState
from .player import checksum_memory, end_state_from
from .snapshot import (
    MIN_ADDR, PAGE_SIZE, PERM_R, PERM_W, PERM_X, USER_ADDR_LIMIT, EndStateConflict, MemChecksum,
    Metadata, Origin, RegisterState, Signal, Snapshot, make_page, merge_end_state, serialize,
)

CODE_BASE = 0x10000000
TRAP = b"\xcc"


class RejectReason(enum.Enum):
    TIMEOUT = "TIMEOUT"
    PAGE_BUDGET = "PAGE_BUDGET"
    MAPPING_COLLISION = "MAPPING_COLLISION"
    NONDETERMINISTIC = "NONDETERMINISTIC"
    BAD_INPUT = "BAD_INPUT"


class MakeRejection(Exception):
    def __init__(self, reason: RejectReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class MakerConfig:
    extra_page_budget: int = 5
    max_instrs: int = 10_000
    cpu_time_limit_ms: float = 3000.0
    determinism_replays: int = 8

    def limits(self) -> Limits:
        return Limits(self.max_instrs, self.cpu_time_limit_ms)


def _mappable(addr: int) -> bool:
    # Page zero and the top of the canonical user range stay unmapped; kernel
    # and non-canonical addresses can never be mapped.
    return MIN_ADDR <= addr < USER_ADDR_LIMIT - PAGE_SIZE


def _end_state(raw: RawEndState, backend, mappings) -> Any:
    sums = [
        MemChecksum(start, len(data), checksum_memory(data)) for start, data in raw.writable_memory
    ]
    return end_state_from(
        raw.registers, raw.signal, sums, backend.flags_mask, backend.descriptor.platform_id,
    )


def make_snapshot(
    code: bytes, backend, config: MakerConfig = MakerConfig(),
    origin: Origin = Origin.IMPORTED, notes: str = "",
) -> Snapshot:
    """Place ``code`` + INT3 at the code base and fault in data pages as needed.

    Raises MakeRejection.  The returned snapshot carries one end state,
    recorded on ``backend``.
    """
    if not 1 <= len(code) <= PAGE_SIZE - 1:
        raise MakeRejection(RejectReason.BAD_INPUT, f"code length {len(code)} not in 1..4095")
    code_page = make_page(code + TRAP, CODE_BASE, PERM_R | PERM_X)
    mappings = [code_page]
    regs = RegisterState(rip=CODE_BASE)
    meta = Metadata(origin=origin, notes=notes)
    limits = config.limits()
    while True:
        snap = Snapshot(regs, tuple(mappings), (), meta)
        try:
            raw = backend.execute(snap, limits)
        except ExecutionTimeout as t:
            raise MakeRejection(RejectReason.TIMEOUT, f"{t.instr_count} instructions") from None
        sig = raw.signal
        if sig.signal is not Signal.SEGV or not _mappable(sig.fault_address):
            break
        page = sig.fault_address & ~(PAGE_SIZE - 1)
        if snap.mapping_at(page) is not None:
            raise MakeRejection(
                RejectReason.MAPPING_COLLISION, f"fault at {sig.fault_address:#x} on a mapped page"
            )
        if len(mappings) - 1 >= config.extra_page_budget:
            raise MakeRejection(
                RejectReason.PAGE_BUDGET, f"needs more than {config.extra_page_budget} extra pages"
            )
        mappings.append(make_page(b"", page, PERM_R | PERM_W))
    return replace(snap, end_states=(_end_state(raw, backend, mappings),)).with_id()


def verify_determinism(
    snapshot: Snapshot, backend, replays: int = 8, limits: Limits = Limits(10_000),
) -> bool:
    """True iff ``replays`` executions give bit-identical raw end states."""
    first = None
    for _ in range(replays):
        try:
            raw = backend.execute(snapshot, limits)
        except ExecutionTimeout:
            return False
        key = (raw.registers, raw.writable_memory, raw.signal)
        if first is None:
            first = key
        elif key != first:
            return False
    return True


@dataclass(frozen=True)
class MultiStateReport:
    snapshot_id: str
    platforms_per_state: tuple[tuple[str, ...], ...]

    @property
    def multi_state(self) -> bool:
        return len(self.platforms_per_state) > 1

    @property
    def reason(self) -> str:
        return f"{len(self.platforms_per_state)} end states"

    def to_json(self) -> dict[str, Any]:
        return {
            "snapshot_id": self.snapshot_id,
            "end_states": [list(p) for p in self.platforms_per_state],
            "multi_state": self.multi_state,
        }


def record_end_states(
    snapshot: Snapshot, backends: Sequence[Any], config: MakerConfig = MakerConfig(),
) -> tuple[Snapshot, MultiStateReport]:
    """Re-record end states on every backend and merge them.

    Raises MakeRejection(TIMEOUT) if any backend times out.
    """
    ids = [b.descriptor.platform_id for b in backends]
    if len(set(ids)) != len(ids):
        raise ValueError(f"backends need distinct platform ids, got {ids}")
    s = replace(snapshot, end_states=())
    writable = {m.start for m in s.writable_mappings()}
    for b in backends:
        try:
            raw = b.execute(s, config.limits())
        except ExecutionTimeout:
            raise MakeRejection(RejectReason.TIMEOUT, f"on {b.descriptor.platform_id}") from None
        assert {start for start, _ in raw.writable_memory} == writable
        try:
            s = merge_end_state(s, _end_state(raw, b, s.mappings))
        except EndStateConflict as e:  # pragma: no cover - distinct ids checked above
            raise ValueError(str(e)) from None
    report = MultiStateReport(s.id, tuple(e.platforms for e in s.end_states))
    return s, report


def filter_multistate(
    corpus: Iterable[tuple[Snapshot, MultiStateReport]],
) -> tuple[list[Snapshot], list[tuple[Snapshot, str]]]:
    kept: list[Snapshot] = []
    discarded: list[tuple[Snapshot, str]] = []
    for s, report in corpus:
        if report.multi_state:
            discarded.append((s, report.reason))
        else:
            kept.append(s)
    return kept, discarded


@dataclass
class MakeResult:
    kept: list[Snapshot] = field(default_factory=list)
    discarded: list[tuple[Snapshot, str]] = field(default_factory=list)
    records: list[dict[str, Any]] = field(default_factory=list)


def make_corpus(
    inputs: Iterable[tuple[str, bytes]], backends: Sequence[Any],
    config: MakerConfig = MakerConfig(), origin: Origin = Origin.IMPORTED,
) -> MakeResult:
    """The full making pipeline over named raw inputs.

    Each input is made on the first backend, verified for determinism on
    every backend, and re-recorded on all of them; multi-state snapshots are
    set aside.  Duplicate snapshots (same id) are kept once.
    """
    if not backends:
        raise ValueError("need at least one backend")
    out = MakeResult()
    seen: set[str] = set()
    staged: list[tuple[Snapshot, MultiStateReport]] = []
    for name, code in inputs:
        try:
            s = make_snapshot(code, backends[0], config, origin, notes=name)
            for b in backends:
                if not verify_determinism(s, b, config.determinism_replays, config.limits()):
                    raise MakeRejection(RejectReason.NONDETERMINISTIC, f"on {b.descriptor.platform_id}")
            s, report = record_end_states(s, backends, config)
        except MakeRejection as r:
            out.records.append({"input": name, "rejected": r.reason.value, "detail": r.detail})
            continue
        dup = s.id in seen
        seen.add(s.id)
        record: dict[str, Any] = {"input": name, "id": s.id, "end_states": len(s.end_states)}
        if dup:
            record["duplicate"] = True
        out.records.append(record)
        if not dup:
            staged.append((s, report))
    kept, discarded = filter_multistate(staged)
    out.kept, out.discarded = kept, discarded
    return out


def write_made_corpus(result: MakeResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in result.kept:
        (out / f"{s.id}.snap").write_bytes(serialize(s))
    if result.discarded:
        side = out / "discarded"
        side.mkdir(exist_ok=True)
        for s, reason in result.discarded:
            (side / f"{s.id}.snap").write_bytes(serialize(s))
            (side / f"{s.id}.reason.json").write_text(
                json.dumps({"snapshot_id": s.id, "reason": reason}, sort_keys=True) + "\n"
            )
    with open(out / "making-report.jsonl", "w") as f:
        for r in result.records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_raw_inputs(in_dir: str | Path) -> list[tuple[str, bytes]]:
    """Every regular file of ``in_dir`` (sorted by name) as raw code bytes."""
    d = Path(in_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"input directory {d} does not exist")
    return [(p.name, p.read_bytes()) for p in sorted(d.iterdir()) if p.is_file() and not p.name.endswith(".jsonl")]
