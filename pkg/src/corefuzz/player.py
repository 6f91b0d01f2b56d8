"""Snapshot playback: command plans, the driver/harness protocol, and outcome
classification against a snapshot's expected end states.
"""

from __future__ import annotations

import enum
import struct
import time
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence, Union

from .backends import ExecutionTimeout, Limits
from .isa.interp import Machine, Memory, cpu_time_ms
from .snapshot import (
    DEFAULT_FLAGS_MASK, GPR_NAMES, MASK64, PAGE_SIZE, PERM_R, PERM_W, RFLAGS_FIXED_ONE,
    EndState, MemChecksum, RegisterState, Signal, SignalRecord, Snapshot, format_flags,
    perms_to_str,
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def checksum_memory(data: bytes) -> int:
    """FNV-1a, 64-bit."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


# -- commands -----------------------------------------------------------------

@dataclass(frozen=True)
class MapCmd:
    start: int
    num_bytes: int


@dataclass(frozen=True)
class WriteCmd:
    start: int
    data: bytes


@dataclass(frozen=True)
class ProtectCmd:
    start: int
    num_bytes: int
    perms: int


@dataclass(frozen=True)
class ExecCmd:
    registers: RegisterState
    cpu_time_limit_ms: int = 3000


@dataclass(frozen=True)
class ChecksumCmd:
    start: int
    num_bytes: int


@dataclass(frozen=True)
class ExitCmd:
    pass


@dataclass(frozen=True)
class ReadCmd:
    """Read memory back (used to capture full writable images)."""

    start: int
    num_bytes: int


Command = Union[MapCmd, WriteCmd, ProtectCmd, ExecCmd, ChecksumCmd, ExitCmd, ReadCmd]

CMD_TYPES = {MapCmd: 1, WriteCmd: 2, ProtectCmd: 3, ExecCmd: 4, ChecksumCmd: 5, ExitCmd: 6, ReadCmd: 7}
RESP_OK, RESP_REGS, RESP_SUM, RESP_FAULT, RESP_DATA, RESP_ERR = 0x80, 0x81, 0x82, 0x83, 0x84, 0xFF


class ErrCode(enum.IntEnum):
    BAD_COMMAND = 1
    MAPPING_COLLISION = 2
    NOT_MAPPED = 3
    TIMEOUT = 4
    UNEXPECTED_SIGNAL = 5
    BAD_ARGUMENT = 6


@dataclass(frozen=True)
class PlayerSettings:
    cpu_time_limit_ms: int = 3000
    flags_mask: int = DEFAULT_FLAGS_MASK
    checksum_all: bool = False
    max_instrs: int = 100_000

    def limits(self) -> Limits:
        return Limits(self.max_instrs, float(self.cpu_time_limit_ms))


def plan_commands(
    snapshot: Snapshot, settings: PlayerSettings = PlayerSettings(), read_back: bool = False,
) -> list[Command]:
    """The driver's command sequence for one snapshot.

    With ``read_back`` the writable mappings are additionally read back in
    full after the checksums, which is how raw end states are captured.
    """
    plan: list[Command] = []
    for m in snapshot.mappings:
        plan.append(MapCmd(m.start, m.num_bytes))
        plan.append(WriteCmd(m.start, m.data))
        plan.append(ProtectCmd(m.start, m.num_bytes, m.perms))
    plan.append(ExecCmd(snapshot.registers, settings.cpu_time_limit_ms))
    for m in snapshot.mappings:
        if settings.checksum_all or m.writable:
            plan.append(ChecksumCmd(m.start, m.num_bytes))
    if read_back:
        plan.extend(ReadCmd(m.start, m.num_bytes) for m in snapshot.mappings if m.writable)
    plan.append(ExitCmd())
    return plan


def command_to_json(cmd: Command) -> dict[str, Any]:
    """Render a command with the field names of the classic driver listing."""
    if isinstance(cmd, MapCmd):
        return {"command": "MapMemory", "start": hex(cmd.start), "num_bytes": cmd.num_bytes}
    if isinstance(cmd, WriteCmd):
        return {
            "command": "WriteMemory", "start": hex(cmd.start), "data": cmd.data.hex(),
            "num_bytes": len(cmd.data),
        }
    if isinstance(cmd, ProtectCmd):
        return {"command": "ProtectMemory", "start": hex(cmd.start), "perms": perms_to_str(cmd.perms)}
    if isinstance(cmd, ExecCmd):
        return {
            "command": "ExecuteSnapshot", "registers": cmd.registers.to_json(),
            "cpu_time_limit_ms": cmd.cpu_time_limit_ms,
        }
    if isinstance(cmd, ChecksumCmd):
        return {"command": "ChecksumMemory", "start": hex(cmd.start), "num_bytes": cmd.num_bytes}
    if isinstance(cmd, ReadCmd):
        return {"command": "ReadMemory", "start": hex(cmd.start), "num_bytes": cmd.num_bytes}
    return {"command": "Exit"}


def format_command(cmd: Command) -> str:
    """One-line human-readable rendering, e.g. ``MapMemory { start = 0x1000, ... }``."""
    if isinstance(cmd, WriteCmd):
        shown = cmd.data.rstrip(b"\0")
        text = "".join(f"\\x{b:02X}" for b in shown)
        if len(shown) < len(cmd.data):
            text += "\\x00..."
        return (
            f'WriteMemory {{ start = {hex(cmd.start)}, data = "{text}", '
            f"num_bytes = {len(cmd.data)} }}"
        )
    if isinstance(cmd, ExecCmd):
        return f"ExecuteSnapshot {{ registers = < ..., rip = {hex(cmd.registers.rip)} > }}"
    d = command_to_json(cmd)
    name = d.pop("command")
    if not d:
        return name
    return f"{name} {{ " + ", ".join(f"{k} = {v}" for k, v in d.items()) + " }"


# -- wire protocol ------------------------------------------------------------

class ProtocolError(Exception):
    pass


def frame(msg_type: int, payload: bytes = b"") -> bytes:
    """[u32 LE length of type byte + payload][type][payload]."""
    return struct.pack("<IB", len(payload) + 1, msg_type) + payload


def _regs_bytes(regs: RegisterState) -> bytes:
    return struct.pack("<18Q", *regs.words())


def encode_command(cmd: Command) -> bytes:
    t = CMD_TYPES[type(cmd)]
    if isinstance(cmd, (MapCmd, ChecksumCmd, ReadCmd)):
        return frame(t, struct.pack("<QQ", cmd.start, cmd.num_bytes))
    if isinstance(cmd, WriteCmd):
        return frame(t, struct.pack("<Q", cmd.start) + cmd.data)
    if isinstance(cmd, ProtectCmd):
        return frame(t, struct.pack("<QQB", cmd.start, cmd.num_bytes, cmd.perms))
    if isinstance(cmd, ExecCmd):
        return frame(t, _regs_bytes(cmd.registers) + struct.pack("<I", cmd.cpu_time_limit_ms))
    return frame(t)


def decode_command(msg_type: int, payload: bytes) -> Command:
    try:
        if msg_type in (1, 5, 7):
            start, n = struct.unpack("<QQ", payload)
            return {1: MapCmd, 5: ChecksumCmd, 7: ReadCmd}[msg_type](start, n)
        if msg_type == 2:
            (start,) = struct.unpack_from("<Q", payload)
            return WriteCmd(start, payload[8:])
        if msg_type == 3:
            return ProtectCmd(*struct.unpack("<QQB", payload))
        if msg_type == 4:
            words = struct.unpack_from("<18Q", payload)
            (limit,) = struct.unpack("<I", payload[144:])
            return ExecCmd(RegisterState.from_words(words), limit)
        if msg_type == 6 and not payload:
            return ExitCmd()
    except struct.error as e:
        raise ProtocolError(f"bad payload for command type {msg_type}: {e}") from None
    raise ProtocolError(f"unknown command type {msg_type:#x}")


@dataclass(frozen=True)
class Ok:
    pass


@dataclass(frozen=True)
class Regs:
    registers: RegisterState


@dataclass(frozen=True)
class Sum:
    value: int


@dataclass(frozen=True)
class FaultResp:
    signal: int
    fault_address: int
    registers: RegisterState


@dataclass(frozen=True)
class Data:
    data: bytes


@dataclass(frozen=True)
class Err:
    code: int


Response = Union[Ok, Regs, Sum, FaultResp, Data, Err]


def encode_response(r: Response) -> bytes:
    if isinstance(r, Ok):
        return frame(RESP_OK)
    if isinstance(r, Regs):
        return frame(RESP_REGS, _regs_bytes(r.registers))
    if isinstance(r, Sum):
        return frame(RESP_SUM, struct.pack("<Q", r.value))
    if isinstance(r, FaultResp):
        return frame(RESP_FAULT, struct.pack("<BQ", r.signal, r.fault_address) + _regs_bytes(r.registers))
    if isinstance(r, Data):
        return frame(RESP_DATA, r.data)
    return frame(RESP_ERR, bytes([r.code]))


def decode_response(msg_type: int, payload: bytes) -> Response:
    try:
        if msg_type == RESP_OK and not payload:
            return Ok()
        if msg_type == RESP_REGS:
            return Regs(RegisterState.from_words(struct.unpack("<18Q", payload)))
        if msg_type == RESP_SUM:
            return Sum(struct.unpack("<Q", payload)[0])
        if msg_type == RESP_FAULT:
            sig, addr = struct.unpack_from("<BQ", payload)
            return FaultResp(sig, addr, RegisterState.from_words(struct.unpack("<18Q", payload[9:])))
        if msg_type == RESP_DATA:
            return Data(payload)
        if msg_type == RESP_ERR and len(payload) == 1:
            return Err(payload[0])
    except (struct.error, ValueError) as e:
        raise ProtocolError(f"bad payload for response type {msg_type:#x}: {e}") from None
    raise ProtocolError(f"unexpected response type {msg_type:#x}")


def read_frame(read) -> tuple[int, bytes]:
    """Read one frame via ``read(n) -> bytes``; raises EOFError on a short read."""
    head = read(5)
    if len(head) < 5:
        raise EOFError("connection closed")
    length, msg_type = struct.unpack("<IB", head)
    if length < 1:
        raise ProtocolError("zero-length frame")
    payload = read(length - 1)
    if len(payload) < length - 1:
        raise EOFError("connection closed mid-frame")
    return msg_type, payload


# -- harnesses ------------------------------------------------------------------

class Harness(Protocol):
    last_exec_ms: float

    def send(self, cmd: Command) -> Response: ...

    def close(self) -> None: ...


class HarnessAnomaly(Exception):
    """The harness died or broke the protocol."""


class InterpHarness:
    """In-process harness executing commands on an interpreter backend."""

    def __init__(self, backend, max_instrs: int = PlayerSettings.max_instrs):
        self.backend = backend
        self.max_instrs = max_instrs
        self.mem = Memory()
        self.last_exec_ms = 0.0

    def _pages(self, start: int, n: int) -> range:
        return range(start, start + n, PAGE_SIZE)

    def send(self, cmd: Command) -> Response:
        mem = self.mem
        if isinstance(cmd, (MapCmd, ProtectCmd, ChecksumCmd, ReadCmd)) and (
            cmd.start % PAGE_SIZE or cmd.num_bytes % PAGE_SIZE or cmd.num_bytes <= 0
        ):
            return Err(ErrCode.BAD_ARGUMENT)
        if isinstance(cmd, MapCmd):
            pages = self._pages(cmd.start, cmd.num_bytes)
            if any(p in mem.pages for p in pages):
                return Err(ErrCode.MAPPING_COLLISION)
            mem.map(cmd.start, bytes(cmd.num_bytes), PERM_R | PERM_W)
            return Ok()
        if isinstance(cmd, WriteCmd):
            if cmd.start % PAGE_SIZE or len(cmd.data) % PAGE_SIZE:
                return Err(ErrCode.BAD_ARGUMENT)
            pages = self._pages(cmd.start, len(cmd.data))
            if not all(p in mem.pages for p in pages):
                return Err(ErrCode.NOT_MAPPED)
            for i, p in enumerate(pages):
                mem.pages[p][:] = cmd.data[i * PAGE_SIZE:(i + 1) * PAGE_SIZE]
            mem.invalidate()
            return Ok()
        if isinstance(cmd, ProtectCmd):
            pages = self._pages(cmd.start, cmd.num_bytes)
            if not all(p in mem.pages for p in pages):
                return Err(ErrCode.NOT_MAPPED)
            for p in pages:
                mem.set_perms(p, cmd.perms)
            return Ok()
        if isinstance(cmd, ExecCmd):
            m = Machine(cmd.registers, mem)
            limits = Limits(self.max_instrs, float(cmd.cpu_time_limit_ms))
            try:
                raw = self.backend.run(m, [], limits)
            except ExecutionTimeout as t:
                self.last_exec_ms = cpu_time_ms(t.instr_count)
                return Err(ErrCode.TIMEOUT)
            self.last_exec_ms = cpu_time_ms(raw.instr_count)
            if raw.signal.signal is Signal.TRAP:
                return Regs(raw.registers)
            return FaultResp(raw.signal.signal.value, raw.signal.fault_address, raw.registers)
        if isinstance(cmd, (ChecksumCmd, ReadCmd)):
            pages = self._pages(cmd.start, cmd.num_bytes)
            if not all(p in mem.pages for p in pages):
                return Err(ErrCode.NOT_MAPPED)
            data = b"".join(bytes(mem.pages[p]) for p in pages)
            return Sum(checksum_memory(data)) if isinstance(cmd, ChecksumCmd) else Data(data)
        if isinstance(cmd, ExitCmd):
            return Ok()
        return Err(ErrCode.BAD_COMMAND)

    def close(self) -> None:
        pass


def open_harness(backend, settings: PlayerSettings = PlayerSettings()) -> Harness:
    opener = getattr(backend, "open_harness", None)
    if opener is not None:
        return opener()
    return InterpHarness(backend, settings.max_instrs)


@dataclass(frozen=True)
class ExecResult:
    registers: RegisterState
    signal: SignalRecord
    checksums: tuple[MemChecksum, ...]
    memory: tuple[tuple[int, bytes], ...]
    cpu_time_ms: float


class PlanTimeout(Exception):
    def __init__(self, cpu_ms: float):
        super().__init__(f"timeout after {cpu_ms:.3f} ms")
        self.cpu_ms = cpu_ms


def run_plan(harness: Harness, plan: Sequence[Command]) -> ExecResult:
    """Drive ``plan`` through ``harness``.

    Raises PlanTimeout for an execution timeout and HarnessAnomaly for any
    protocol violation, unexpected error response, or harness death.
    """
    regs: RegisterState | None = None
    signal = SignalRecord(Signal.TRAP)
    sums: list[MemChecksum] = []
    images: list[tuple[int, bytes]] = []
    for cmd in plan:
        try:
            r = harness.send(cmd)
        except (EOFError, OSError, ProtocolError) as e:
            raise HarnessAnomaly(f"{type(cmd).__name__}: {e}") from e
        if isinstance(cmd, ExecCmd):
            if isinstance(r, Regs):
                regs = r.registers
            elif isinstance(r, FaultResp):
                try:
                    sig = Signal(r.signal)
                except ValueError:
                    raise HarnessAnomaly(f"signal {r.signal} outside the modeled set") from None
                regs = r.registers
                signal = SignalRecord(sig, r.fault_address)
            elif isinstance(r, Err) and r.code == ErrCode.TIMEOUT:
                raise PlanTimeout(harness.last_exec_ms)
            else:
                raise HarnessAnomaly(f"unexpected EXEC response {r!r}")
        elif isinstance(cmd, ChecksumCmd):
            if not isinstance(r, Sum):
                raise HarnessAnomaly(f"unexpected CHECKSUM response {r!r}")
            sums.append(MemChecksum(cmd.start, cmd.num_bytes, r.value))
        elif isinstance(cmd, ReadCmd):
            if not isinstance(r, Data) or len(r.data) != cmd.num_bytes:
                raise HarnessAnomaly(f"unexpected READ response {r!r}")
            images.append((cmd.start, r.data))
        elif not isinstance(r, Ok):
            raise HarnessAnomaly(f"{type(cmd).__name__} failed with {r!r}")
    if regs is None:
        raise HarnessAnomaly("plan had no EXEC")
    return ExecResult(regs, signal, tuple(sums), tuple(images), harness.last_exec_ms)


# -- outcomes -------------------------------------------------------------------

class Verdict(enum.Enum):
    MATCH = "MATCH"
    MISMATCH = "MISMATCH"
    TIMEOUT = "TIMEOUT"
    HARNESS_ANOMALY = "HARNESS_ANOMALY"


class MismatchCategory(enum.Enum):
    REGISTER = "REGISTER"
    FLAGS = "FLAGS"
    END_PC = "END_PC"
    MEMORY = "MEMORY"
    SIGNAL_UNEXPECTED = "SIGNAL_UNEXPECTED"
    SIGNAL_MISSING = "SIGNAL_MISSING"


@dataclass(frozen=True)
class MismatchDetail:
    category: MismatchCategory
    detail: dict[str, Any]

    def to_json(self) -> dict[str, Any]:
        return {"category": self.category.value, "detail": self.detail}


@dataclass(frozen=True)
class Outcome:
    verdict: Verdict
    snapshot_id: str
    core_id: int
    cpu_time_ms: float
    matched_platform: str | None = None
    mismatch: MismatchDetail | None = None
    note: str = ""

    def __post_init__(self) -> None:
        assert (self.verdict is Verdict.MATCH) == (self.matched_platform is not None)
        assert (self.verdict is Verdict.MISMATCH) == (self.mismatch is not None)

    def to_json(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict.value,
            "snapshot_id": self.snapshot_id,
            "core_id": self.core_id,
            "cpu_time_ms": round(self.cpu_time_ms, 6),
            "matched_platform": self.matched_platform,
            "mismatch": self.mismatch.to_json() if self.mismatch else None,
            "note": self.note,
        }


def mask_registers(regs: RegisterState, flags_mask: int) -> RegisterState:
    return RegisterState(regs.gpr, regs.rip, (regs.rflags & flags_mask) | RFLAGS_FIXED_ONE)


def end_state_from(
    regs: RegisterState, signal: SignalRecord, checksums: Sequence[MemChecksum],
    flags_mask: int, platform: str | None = None,
) -> EndState:
    return EndState(
        mask_registers(regs, flags_mask), tuple(checksums), signal,
        (platform,) if platform else (),
    )


def classify(expected: EndState, actual: EndState, flags_mask: int) -> MismatchDetail | None:
    """First difference between two end states, or None if they match.

    A different kind of stop is reported first; otherwise the order is
    REGISTER, FLAGS, END_PC, MEMORY, then the fault address.
    """
    es, acts = expected.signal or SignalRecord(Signal.TRAP), actual.signal or SignalRecord(Signal.TRAP)
    if es.signal is not acts.signal:
        if es.signal is not Signal.TRAP and acts.signal is Signal.TRAP:
            return MismatchDetail(
                MismatchCategory.SIGNAL_MISSING,
                {"expected": es.signal.name, "actual": acts.signal.name},
            )
        return MismatchDetail(
            MismatchCategory.SIGNAL_UNEXPECTED,
            {"expected": es.signal.name, "actual": acts.signal.name,
             "fault_address": hex(acts.fault_address)},
        )
    er, ar = expected.registers, actual.registers
    for name, a, b in zip(GPR_NAMES, er.gpr, ar.gpr):
        if a != b:
            return MismatchDetail(
                MismatchCategory.REGISTER,
                {"register": name, "expected": hex(a), "actual": hex(b), "xor": hex(a ^ b)},
            )
    ef, af = er.rflags & flags_mask, ar.rflags & flags_mask
    if ef != af:
        return MismatchDetail(
            MismatchCategory.FLAGS,
            {"sticky": format_flags(af & ~ef), "cleared": format_flags(ef & ~af),
             "expected": hex(er.rflags), "actual": hex(ar.rflags)},
        )
    if er.rip != ar.rip:
        return MismatchDetail(
            MismatchCategory.END_PC,
            {"expected": hex(er.rip), "actual": hex(ar.rip), "delta": ar.rip - er.rip},
        )
    exp_sums = {c.start: c for c in expected.mem_checksums}
    for c in actual.mem_checksums:
        e = exp_sums.get(c.start)
        # Extra checksums (``checksum_all`` over read-only pages) are not compared.
        if e is not None and e.checksum != c.checksum:
            return MismatchDetail(MismatchCategory.MEMORY, {"start": hex(c.start)})
    missing = sorted(set(exp_sums) - {c.start for c in actual.mem_checksums})
    if missing:
        return MismatchDetail(MismatchCategory.MEMORY, {"start": hex(missing[0])})
    if es.fault_address != acts.fault_address:
        return MismatchDetail(
            MismatchCategory.SIGNAL_UNEXPECTED,
            {"expected": es.signal.name, "actual": acts.signal.name,
             "fault_address": hex(acts.fault_address),
             "expected_fault_address": hex(es.fault_address)},
        )
    return None


def _closest(expected: Sequence[EndState], actual: EndState) -> EndState:
    for e in expected:
        if (e.signal or SignalRecord(Signal.TRAP)).signal is (actual.signal or SignalRecord(Signal.TRAP)).signal:
            return e
    return expected[0]


@dataclass
class PlayStats:
    anomalies: int = 0
    retries: int = 0


@dataclass
class Player:
    """Plays snapshots on one backend; keeps harness state between plays."""

    backend: Any
    settings: PlayerSettings = field(default_factory=PlayerSettings)
    stats: PlayStats = field(default_factory=PlayStats)

    def play(self, snapshot: Snapshot) -> Outcome:
        if not snapshot.end_states:
            raise ValueError("snapshot has no expected end states")
        core = self.backend.descriptor.core_id
        plan = plan_commands(snapshot, self.settings)
        for attempt in range(2):
            harness = open_harness(self.backend, self.settings)
            t0 = time.perf_counter()
            try:
                res = run_plan(harness, plan)
                break
            except PlanTimeout as t:
                return Outcome(Verdict.TIMEOUT, snapshot.id, core, t.cpu_ms)
            except HarnessAnomaly as e:
                self.stats.anomalies += 1
                recycle = getattr(self.backend, "recycle", None)
                if recycle is not None:
                    recycle()
                if attempt == 0:
                    self.stats.retries += 1
                    continue
                return Outcome(
                    Verdict.HARNESS_ANOMALY, snapshot.id, core,
                    (time.perf_counter() - t0) * 1000, note=str(e),
                )
        actual = end_state_from(res.registers, res.signal, res.checksums, self.settings.flags_mask)
        mask = self.settings.flags_mask
        for e in snapshot.end_states:
            if classify(e, actual, mask) is None:
                platform = e.platforms[0] if e.platforms else "unknown"
                return Outcome(Verdict.MATCH, snapshot.id, core, res.cpu_time_ms, matched_platform=platform)
        detail = classify(_closest(snapshot.end_states, actual), actual, mask)
        assert detail is not None
        return Outcome(Verdict.MISMATCH, snapshot.id, core, res.cpu_time_ms, mismatch=detail)


def play(backend, snapshot: Snapshot, settings: PlayerSettings = PlayerSettings()) -> Outcome:
    return Player(backend, settings).play(snapshot)
