"""Snapshot data model, canonical serialization and content-derived ids.

A snapshot is a self-contained machine-code test: initial registers,
page-granular memory mappings, and the end state(s) it is expected to reach.
All types here are immutable; "changing" a snapshot means building a new one
(and therefore a new id).
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

PAGE_SIZE = 4096
MIN_ADDR = 0x1000
USER_ADDR_LIMIT = 1 << 47
MASK64 = (1 << 64) - 1

GPR_NAMES = (
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)
# Index of each GPR in the fixed register order (not the x86 encoding order).
GPR_INDEX = {name: i for i, name in enumerate(GPR_NAMES)}

PERM_R, PERM_W, PERM_X = 1, 2, 4

FLAG_BITS = {"CF": 0, "PF": 2, "AF": 4, "ZF": 6, "SF": 7, "DF": 10, "OF": 11}
DEFAULT_FLAGS_MASK = (1 << 0) | (1 << 6) | (1 << 7) | (1 << 11)  # CF|ZF|SF|OF
RFLAGS_FIXED_ONE = 0x2
_RFLAGS_RESERVED_ZERO = (1 << 3) | (1 << 5) | (MASK64 & ~((1 << 22) - 1))


def canonical_rflags(value: int) -> int:
    return (value | RFLAGS_FIXED_ONE) & ~_RFLAGS_RESERVED_ZERO & MASK64


def parse_flags_mask(text: str) -> int:
    """Parse "CF|ZF|SF|OF" (or an integer literal) into a bit mask."""
    text = text.strip()
    if not text:
        return 0
    if text[0].isdigit():
        return int(text, 0)
    mask = 0
    for name in text.split("|"):
        name = name.strip().upper()
        if name not in FLAG_BITS:
            raise ValueError(f"unknown flag {name!r}")
        mask |= 1 << FLAG_BITS[name]
    return mask


def format_flags(mask: int) -> str:
    return "|".join(n for n, b in FLAG_BITS.items() if mask >> b & 1)


def perms_to_str(perms: int) -> str:
    return (
        ("r" if perms & PERM_R else "-")
        + ("w" if perms & PERM_W else "-")
        + ("x" if perms & PERM_X else "-")
    )


def perms_from_str(text: str) -> int:
    if len(text) != 3 or any(c not in "rwx-" for c in text):
        raise ValueError(f"bad perms string {text!r}")
    return (
        (PERM_R if text[0] == "r" else 0)
        | (PERM_W if text[1] == "w" else 0)
        | (PERM_X if text[2] == "x" else 0)
    )


class Signal(enum.Enum):
    SEGV = 11
    ILL = 4
    FPE = 8
    TRAP = 5
    BUS = 7


class Origin(enum.Enum):
    FUZZ_PROXY_DECODER = "FUZZ_PROXY_DECODER"
    FUZZ_PROXY_INTERP = "FUZZ_PROXY_INTERP"
    RANDOM_GEN = "RANDOM_GEN"
    IMPORTED = "IMPORTED"
    HAND_WRITTEN = "HAND_WRITTEN"


class SnapshotError(Exception):
    """Base class for snapshot model errors."""


class InvalidSnapshot(SnapshotError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class MalformedDocument(SnapshotError):
    pass


class IdMismatch(SnapshotError):
    pass


class EndStateConflict(SnapshotError):
    pass


@dataclass(frozen=True)
class RegisterState:
    gpr: tuple[int, ...] = (0,) * 16
    rip: int = 0
    rflags: int = RFLAGS_FIXED_ONE

    def __getitem__(self, name: str) -> int:
        if name == "rip":
            return self.rip
        if name == "rflags":
            return self.rflags
        return self.gpr[GPR_INDEX[name]]

    def with_regs(self, **values: int) -> RegisterState:
        gpr = list(self.gpr)
        rip, rflags = self.rip, self.rflags
        for name, v in values.items():
            if name == "rip":
                rip = v
            elif name == "rflags":
                rflags = v
            else:
                gpr[GPR_INDEX[name]] = v & MASK64
        return RegisterState(tuple(gpr), rip, rflags)

    def words(self) -> tuple[int, ...]:
        """The 18-word register block: 16 GPRs, rip, rflags."""
        return (*self.gpr, self.rip, self.rflags)

    @classmethod
    def from_words(cls, words: Iterable[int]) -> RegisterState:
        w = tuple(words)
        if len(w) != 18:
            raise ValueError("register block needs 18 words")
        return cls(w[:16], w[16], w[17])

    def to_json(self) -> dict[str, str]:
        d = {name: hex(v) for name, v in zip(GPR_NAMES, self.gpr)}
        d["rip"] = hex(self.rip)
        d["rflags"] = hex(self.rflags)
        return d

    @classmethod
    def from_json(cls, d: dict[str, str]) -> RegisterState:
        if set(d) != set(GPR_NAMES) | {"rip", "rflags"}:
            raise MalformedDocument("register object has wrong keys")
        return cls(
            tuple(_hex(d[n]) for n in GPR_NAMES), _hex(d["rip"]), _hex(d["rflags"])
        )


@dataclass(frozen=True)
class MemoryMapping:
    start: int
    num_bytes: int
    perms: int
    data: bytes

    @property
    def end(self) -> int:
        return self.start + self.num_bytes

    @property
    def writable(self) -> bool:
        return bool(self.perms & PERM_W)

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def to_json(self) -> dict[str, Any]:
        return {
            "start": hex(self.start),
            "num_bytes": hex(self.num_bytes),
            "perms": perms_to_str(self.perms),
            "data": self.data.hex(),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> MemoryMapping:
        return cls(
            _hex(d["start"]), _hex(d["num_bytes"]), perms_from_str(d["perms"]),
            bytes.fromhex(d["data"]),
        )


@dataclass(frozen=True)
class SignalRecord:
    signal: Signal
    fault_address: int = 0

    def to_json(self) -> dict[str, str]:
        return {"signal": self.signal.name, "fault_address": hex(self.fault_address)}

    @classmethod
    def from_json(cls, d: dict[str, str]) -> SignalRecord:
        try:
            sig = Signal[d["signal"]]
        except KeyError as e:
            raise MalformedDocument(f"unknown signal {d.get('signal')!r}") from e
        return cls(sig, _hex(d["fault_address"]))


TRAP_END = SignalRecord(Signal.TRAP, 0)


@dataclass(frozen=True)
class MemChecksum:
    start: int
    num_bytes: int
    checksum: int

    def to_json(self) -> dict[str, str]:
        return {
            "start": hex(self.start),
            "num_bytes": hex(self.num_bytes),
            "checksum": hex(self.checksum),
        }


@dataclass(frozen=True)
class EndState:
    registers: RegisterState
    mem_checksums: tuple[MemChecksum, ...] = ()
    signal: SignalRecord | None = None
    platforms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "mem_checksums", tuple(sorted(self.mem_checksums, key=lambda c: c.start))
        )
        object.__setattr__(self, "platforms", tuple(sorted(set(self.platforms))))

    def same_outcome(self, other: EndState) -> bool:
        return (
            self.registers == other.registers
            and self.mem_checksums == other.mem_checksums
            and self.signal == other.signal
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "registers": self.registers.to_json(),
            "mem_checksums": [c.to_json() for c in self.mem_checksums],
            "signal": self.signal.to_json() if self.signal else None,
            "platforms": list(self.platforms),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> EndState:
        return cls(
            RegisterState.from_json(d["registers"]),
            tuple(
                MemChecksum(_hex(c["start"]), _hex(c["num_bytes"]), _hex(c["checksum"]))
                for c in d["mem_checksums"]
            ),
            SignalRecord.from_json(d["signal"]) if d["signal"] is not None else None,
            tuple(d["platforms"]),
        )


@dataclass(frozen=True)
class Metadata:
    origin: Origin = Origin.HAND_WRITTEN
    parents: tuple[str, ...] = ()
    notes: str = ""
    tags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "parents", tuple(sorted(set(self.parents))))
        object.__setattr__(self, "tags", tuple(sorted(set(self.tags))))

    def to_json(self) -> dict[str, Any]:
        return {
            "origin": self.origin.value,
            "parents": list(self.parents),
            "notes": self.notes,
            "tags": list(self.tags),
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> Metadata:
        return cls(Origin(d["origin"]), tuple(d["parents"]), d["notes"], tuple(d["tags"]))


@dataclass(frozen=True)
class Snapshot:
    registers: RegisterState
    mappings: tuple[MemoryMapping, ...]
    end_states: tuple[EndState, ...] = ()
    metadata: Metadata = field(default_factory=Metadata)
    id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "mappings", tuple(sorted(self.mappings, key=lambda m: m.start)))
        object.__setattr__(
            self, "end_states", tuple(sorted(self.end_states, key=_end_state_key))
        )

    @property
    def quarantined(self) -> bool:
        return "quarantined" in self.metadata.tags

    def mapping_at(self, addr: int) -> MemoryMapping | None:
        for m in self.mappings:
            if m.contains(addr):
                return m
        return None

    def writable_mappings(self) -> tuple[MemoryMapping, ...]:
        return tuple(m for m in self.mappings if m.writable)

    def with_id(self) -> Snapshot:
        s = replace(self, id="")
        return replace(s, id=snapshot_id(s))

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "registers": self.registers.to_json(),
            "mappings": [m.to_json() for m in self.mappings],
            "end_states": [e.to_json() for e in self.end_states],
            "metadata": self.metadata.to_json(),
        }


def _hex(text: Any) -> int:
    if not isinstance(text, str) or not text.startswith("0x"):
        raise MalformedDocument(f"expected 0x-prefixed hex string, got {text!r}")
    try:
        return int(text, 16)
    except ValueError as e:
        raise MalformedDocument(str(e)) from e


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _end_state_key(e: EndState) -> str:
    return _dumps(e.to_json())


def _user_range_ok(start: int, end: int) -> bool:
    return MIN_ADDR <= start and end <= USER_ADDR_LIMIT


def _validate_registers(regs: RegisterState, where: str) -> list[str]:
    out = []
    if len(regs.gpr) != 16:
        out.append(f"{where}: expected 16 GPRs")
    if any(not 0 <= v <= MASK64 for v in (*regs.gpr, regs.rip, regs.rflags)):
        out.append(f"{where}: register value out of 64-bit range")
    if canonical_rflags(regs.rflags) != regs.rflags:
        out.append(f"{where}: rflags reserved bits not canonical")
    return out


def validate(s: Snapshot) -> list[str]:
    """Return every invariant violation of ``s`` (empty list means valid)."""
    v = _validate_registers(s.registers, "registers")
    rip = s.registers.rip
    if rip < MIN_ADDR:
        v.append("rip below 0x1000")
    elif rip >= USER_ADDR_LIMIT:
        v.append("rip above user address limit")

    for m in s.mappings:
        if m.start % PAGE_SIZE or m.num_bytes % PAGE_SIZE:
            v.append(f"mapping {m.start:#x} not page aligned")
        if m.num_bytes <= 0:
            v.append(f"mapping {m.start:#x} is empty")
        if not _user_range_ok(m.start, m.end):
            v.append(f"mapping {m.start:#x} outside user range")
        if len(m.data) != m.num_bytes:
            v.append(f"mapping {m.start:#x} data length mismatch")
        if m.perms & ~(PERM_R | PERM_W | PERM_X):
            v.append(f"mapping {m.start:#x} has unknown permission bits")
    for a, b in zip(s.mappings, s.mappings[1:]):
        if b.start < a.end:
            v.append("overlapping mappings")
            break

    code = s.mapping_at(rip)
    if rip >= MIN_ADDR and (code is None or not code.perms & PERM_X):
        v.append("rip not in an executable mapping")

    writable = [(m.start, m.num_bytes) for m in s.writable_mappings()]
    for i, e in enumerate(s.end_states):
        v.extend(_validate_registers(e.registers, f"end_states[{i}]"))
        if [(c.start, c.num_bytes) for c in e.mem_checksums] != writable:
            v.append(f"end_states[{i}]: checksums do not match writable mappings")
        if e.signal is not None and e.signal.fault_address and e.signal.signal not in (
            Signal.SEGV, Signal.BUS,
        ):
            v.append(f"end_states[{i}]: fault address set for {e.signal.signal.name}")
        if not e.platforms:
            v.append(f"end_states[{i}]: no platforms")
    return v


def serialize(s: Snapshot) -> bytes:
    violations = validate(s)
    if violations:
        raise InvalidSnapshot(violations)
    return _dumps(s.to_json()).encode()


def snapshot_id(s: Snapshot) -> str:
    blob = _dumps(replace(s, id="").to_json()).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def deserialize(b: bytes) -> Snapshot:
    try:
        d = json.loads(b)
    except (ValueError, UnicodeDecodeError) as e:
        raise MalformedDocument(f"not a JSON document: {e}") from e
    try:
        s = Snapshot(
            RegisterState.from_json(d["registers"]),
            tuple(MemoryMapping.from_json(m) for m in d["mappings"]),
            tuple(EndState.from_json(e) for e in d["end_states"]),
            Metadata.from_json(d["metadata"]),
            d["id"],
        )
    except MalformedDocument:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedDocument(f"bad snapshot document: {e!r}") from e
    violations = validate(s)
    if violations:
        raise InvalidSnapshot(violations)
    expected = snapshot_id(s)
    if s.id != expected:
        raise IdMismatch(f"id {s.id!r} does not match content id {expected!r}")
    return s


def merge_end_state(s: Snapshot, e: EndState) -> Snapshot:
    """Add ``e`` to ``s``: union platforms for an identical outcome, else append."""
    states = list(s.end_states)
    for i, existing in enumerate(states):
        if existing.same_outcome(e):
            states[i] = replace(existing, platforms=existing.platforms + e.platforms)
            break
    else:
        clash = {p for x in states for p in x.platforms} & set(e.platforms)
        if clash:
            raise EndStateConflict(
                f"platform(s) {sorted(clash)} already have a different end state"
            )
        states.append(e)
    return replace(s, end_states=tuple(states)).with_id()


def make_page(data: bytes, start: int, perms: int) -> MemoryMapping:
    """A single page (or more) zero-filled to a page boundary."""
    size = max(PAGE_SIZE, -(-len(data) // PAGE_SIZE) * PAGE_SIZE)
    return MemoryMapping(start, size, perms, data.ljust(size, b"\0"))
