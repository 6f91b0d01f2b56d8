"""Execution backends: the clean interpreter, fault-injected interpreters, and
the descriptor shared with the native backend.

A fault-injected backend simulates one defective core.  Each profile decides
per execution whether it is active, using a draw keyed by the backend seed,
the profile's own seed and the backend's execution counter, so "sometimes
wrong" behavior is exactly reproducible.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Protocol, Union

from .isa.decoder import Instr, Op, Reg
from .isa.interp import (
    ExecutionTimeout, Limits, Machine, RawEndState, destination, run_machine, source,
    writes_flags,
)
from .snapshot import (
    DEFAULT_FLAGS_MASK, FLAG_BITS, MASK64, PERM_W, Snapshot,
)

__all__ = [
    "Backend", "BackendDescriptor", "BackendKind", "BitFlipResult", "ConfigError",
    "ExecutionTimeout", "FaultBackend", "FaultProfile", "HiddenStateMiscompute",
    "IllegalOvershoot", "InterpBackend", "Limits", "RawEndState", "RepUndershoot",
    "SkipSideEffect", "StickyFlag", "load_profiles", "make_fault_backend", "profile_from_json",
    "profile_to_json",
]

INTERP_PLATFORM = "interp-v1"


class ConfigError(ValueError):
    """A fault profile, backend spec or configuration file is invalid."""


class BackendKind(enum.Enum):
    INTERP = "INTERP"
    INTERP_FAULTED = "INTERP_FAULTED"
    NATIVE = "NATIVE"


@dataclass(frozen=True)
class BackendDescriptor:
    kind: BackendKind
    platform_id: str
    core_id: int = 0
    # Address ranges [start, end) the backend cannot map snapshot pages into.
    reserved: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if not self.platform_id:
            raise ConfigError("platform_id must be non-empty")
        if self.core_id < 0:
            raise ConfigError("core_id must be >= 0")


class Backend(Protocol):
    descriptor: BackendDescriptor
    flags_mask: int

    def execute(self, snapshot: Snapshot, limits: Limits) -> RawEndState: ...

    def reset(self) -> None: ...


class InterpBackend:
    """The clean reference interpreter bound to a (simulated) core."""

    def __init__(
        self, platform_id: str = INTERP_PLATFORM, core_id: int = 0,
        flags_mask: int = DEFAULT_FLAGS_MASK,
    ):
        self.descriptor = BackendDescriptor(BackendKind.INTERP, platform_id, core_id)
        self.flags_mask = flags_mask

    def execute(self, snapshot: Snapshot, limits: Limits = Limits()) -> RawEndState:
        m = Machine.from_snapshot(snapshot)
        writable = [(x.start, x.num_bytes) for x in snapshot.mappings if x.perms & PERM_W]
        return self.run(m, writable, limits)

    def run(self, m: Machine, writable: list[tuple[int, int]], limits: Limits) -> RawEndState:
        return run_machine(m, writable, limits, False)[0]

    def reset(self) -> None:
        pass

    def __repr__(self) -> str:
        return f"InterpBackend({self.descriptor.platform_id!r}, core={self.descriptor.core_id})"


# -- fault profiles -------------------------------------------------------------

@dataclass(frozen=True)
class BitFlipResult:
    opcode: Op
    bit_index: int
    trigger_bit_clear: int | None = None


@dataclass(frozen=True)
class IllegalOvershoot:
    skip_len: int


@dataclass(frozen=True)
class StickyFlag:
    flag: str


@dataclass(frozen=True)
class RepUndershoot:
    min_count: int


@dataclass(frozen=True)
class HiddenStateMiscompute:
    arm_opcode: Op
    victim_opcode: Op
    duration: int


# Which side effects can be skipped, per opcode.
SIDE_EFFECTS = {
    "flags": None,  # any flag-writing opcode
    "rsp": frozenset({Op.PUSH, Op.POP}),
    "pointers": frozenset({Op.MOVSB, Op.STOSB}),
    "rdx": frozenset({Op.MUL, Op.IMUL, Op.DIV}),
}


@dataclass(frozen=True)
class SkipSideEffect:
    opcode: Op
    effect_id: str


Effect = Union[
    BitFlipResult, IllegalOvershoot, StickyFlag, RepUndershoot, HiddenStateMiscompute,
    SkipSideEffect,
]
_EFFECT_NAMES = {
    BitFlipResult: "BIT_FLIP_RESULT", IllegalOvershoot: "ILLEGAL_OVERSHOOT",
    StickyFlag: "STICKY_FLAG", RepUndershoot: "REP_UNDERSHOOT",
    HiddenStateMiscompute: "HIDDEN_STATE_MISCOMPUTE", SkipSideEffect: "SKIP_SIDE_EFFECT",
}


@dataclass(frozen=True)
class FaultProfile:
    name: str
    active_cores: frozenset[int]
    activation_probability: Fraction
    effect: Effect
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "active_cores", frozenset(self.active_cores))
        object.__setattr__(self, "activation_probability", Fraction(self.activation_probability))
        for problem in _profile_problems(self):
            raise ConfigError(f"fault profile {self.name!r}: {problem}")

    def targets(self) -> frozenset[str]:
        """Names of the behaviors this profile alters, for overlap detection."""
        e = self.effect
        if isinstance(e, BitFlipResult):
            return frozenset({e.opcode.name})
        if isinstance(e, IllegalOvershoot):
            return frozenset({Op.UD2.name})
        if isinstance(e, StickyFlag):
            return frozenset({f"flag:{e.flag}"})
        if isinstance(e, RepUndershoot):
            return frozenset({Op.MOVSB.name, Op.STOSB.name})
        if isinstance(e, HiddenStateMiscompute):
            return frozenset({e.victim_opcode.name})
        return frozenset({e.opcode.name})


def _profile_problems(p: FaultProfile) -> Iterable[str]:
    if not p.active_cores:
        yield "active_cores must be non-empty"
    if any(c < 0 for c in p.active_cores):
        yield "core ids must be >= 0"
    if not 0 <= p.activation_probability <= 1:
        yield "activation_probability must be in [0, 1]"
    e = p.effect
    if isinstance(e, BitFlipResult):
        if not 0 <= e.bit_index <= 63:
            yield "bit_index must be in 0..63"
        if e.trigger_bit_clear is not None and not 0 <= e.trigger_bit_clear <= 63:
            yield "trigger bit must be in 0..63"
    elif isinstance(e, IllegalOvershoot):
        if e.skip_len < 0:
            yield "skip_len must be >= 0"
    elif isinstance(e, StickyFlag):
        if e.flag not in FLAG_BITS:
            yield f"unknown flag {e.flag!r}"
    elif isinstance(e, RepUndershoot):
        if e.min_count < 1:
            yield "min_count must be >= 1"
    elif isinstance(e, HiddenStateMiscompute):
        if e.duration < 1:
            yield "duration must be >= 1"
    elif isinstance(e, SkipSideEffect):
        ops = SIDE_EFFECTS.get(e.effect_id, ())
        if e.effect_id not in SIDE_EFFECTS:
            yield f"unknown effect_id {e.effect_id!r}"
        elif ops is None:
            from .isa.interp import FLAG_WRITERS
            if e.opcode not in FLAG_WRITERS:
                yield f"{e.opcode.name} does not write flags"
        elif e.opcode not in ops:
            yield f"{e.opcode.name} has no {e.effect_id!r} side effect"
    else:
        yield f"unknown effect {e!r}"


def _op(name: Any) -> Op:
    try:
        return Op[name]
    except KeyError:
        raise ConfigError(f"unknown opcode {name!r}") from None


def _prob(v: Any) -> Fraction:
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ConfigError(f"bad activation_probability {v!r}")
    try:
        return Fraction(str(v)) if isinstance(v, float) else Fraction(v)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad activation_probability {v!r}") from None


def profile_from_json(d: dict[str, Any]) -> FaultProfile:
    try:
        e = dict(d["effect"])
        kind = e.pop("type")
        if kind == "BIT_FLIP_RESULT":
            trig = e.pop("trigger", None)
            trig_bit = None if trig is None else int(trig["operand_bit_clear"])
            effect: Effect = BitFlipResult(_op(e.pop("opcode")), int(e.pop("bit_index")), trig_bit)
        elif kind == "ILLEGAL_OVERSHOOT":
            effect = IllegalOvershoot(int(e.pop("skip_len")))
        elif kind == "STICKY_FLAG":
            effect = StickyFlag(str(e.pop("flag")))
        elif kind == "REP_UNDERSHOOT":
            effect = RepUndershoot(int(e.pop("min_count")))
        elif kind == "HIDDEN_STATE_MISCOMPUTE":
            effect = HiddenStateMiscompute(
                _op(e.pop("arm_opcode")), _op(e.pop("victim_opcode")), int(e.pop("duration"))
            )
        elif kind == "SKIP_SIDE_EFFECT":
            effect = SkipSideEffect(_op(e.pop("opcode")), str(e.pop("effect_id")))
        else:
            raise ConfigError(f"unknown effect type {kind!r}")
        if e:
            raise ConfigError(f"unknown effect field(s) {sorted(e)}")
        extra = set(d) - {"name", "active_cores", "activation_probability", "effect", "seed"}
        if extra:
            raise ConfigError(f"unknown profile field(s) {sorted(extra)}")
        return FaultProfile(
            str(d["name"]), frozenset(int(c) for c in d["active_cores"]),
            _prob(d["activation_probability"]), effect, int(d.get("seed", 0)),
        )
    except KeyError as k:
        raise ConfigError(f"fault profile missing field {k}") from None
    except (TypeError, ValueError) as ex:
        if isinstance(ex, ConfigError):
            raise
        raise ConfigError(f"bad fault profile: {ex}") from None


def profile_to_json(p: FaultProfile) -> dict[str, Any]:
    e = p.effect
    body: dict[str, Any] = {"type": _EFFECT_NAMES[type(e)]}
    for k, v in e.__dict__.items():
        if k == "trigger_bit_clear":
            if v is not None:
                body["trigger"] = {"operand_bit_clear": v}
        else:
            body[k] = v.name if isinstance(v, Op) else v
    return {
        "name": p.name,
        "active_cores": sorted(p.active_cores),
        "activation_probability": str(p.activation_probability),
        "effect": body,
        "seed": p.seed,
    }


def load_profiles(path: str | Path) -> list[FaultProfile]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read fault profiles from {path}: {e}") from None
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list):
        raise ConfigError("fault profile file must hold a JSON object or list")
    return [profile_from_json(d) for d in doc]


def check_overlaps(profiles: Iterable[FaultProfile]) -> None:
    seen: dict[tuple[int, str], str] = {}
    for p in profiles:
        for core in p.active_cores:
            for t in p.targets():
                other = seen.setdefault((core, t), p.name)
                if other != p.name:
                    raise ConfigError(
                        f"profiles {other!r} and {p.name!r} both target {t} on core {core}"
                    )


# -- the fault-injecting wrapper -------------------------------------------------

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def activation_draw(backend_seed: int, profile_seed: int, counter: int) -> int:
    """Uniform 64-bit draw keyed by (backend seed, profile seed, execution counter)."""
    return splitmix64(splitmix64(splitmix64(backend_seed & MASK64) ^ profile_seed & MASK64) ^ counter)


def is_active(p: FaultProfile, backend_seed: int, counter: int) -> bool:
    q = p.activation_probability
    return activation_draw(backend_seed, p.seed, counter) * q.denominator < q.numerator << 64


class _Effects:
    """Per-execution hook object consulted by the interpreter loop."""

    def __init__(self, active: list[FaultProfile], hidden: list[tuple[int, HiddenStateMiscompute, bool]],
                 hidden_state: dict[int, int]):
        self.overshoot: int | None = None
        self.bitflip: dict[Op, BitFlipResult] = {}
        self.skip: dict[Op, str] = {}
        self.sticky = 0
        for p in active:
            e = p.effect
            if isinstance(e, IllegalOvershoot):
                self.overshoot = e.skip_len
            elif isinstance(e, BitFlipResult):
                self.bitflip[e.opcode] = e
            elif isinstance(e, SkipSideEffect):
                self.skip[e.opcode] = e.effect_id
            elif isinstance(e, StickyFlag):
                self.sticky |= 1 << FLAG_BITS[e.flag]
        self.hidden = hidden
        self.hidden_state = hidden_state

    def step(self, m: Machine, ins: Instr, handler, nrip: int) -> int:
        op = ins.opcode
        if op is Op.UD2 and self.overshoot is not None:
            return (m.rip + self.overshoot) & MASK64
        skip = self.skip.get(op)
        saved = _capture(m, skip) if skip else None
        flip = self.bitflip.get(op)
        if flip is not None and flip.trigger_bit_clear is not None:
            src = source(ins)
            if src is None or m.get(src, 64) >> flip.trigger_bit_clear & 1:
                flip = None
        rip = handler(m, ins, nrip)
        if saved is not None:
            _restore(m, skip, saved)
        if flip is not None:
            _flip(m, ins, flip.bit_index)
        if self.sticky and writes_flags(ins):
            m.rflags |= self.sticky
        for idx, e, armable in self.hidden:
            left = self.hidden_state.get(idx, 0)
            if left > 0:
                if op is e.victim_opcode:
                    _flip(m, ins, 0)
                self.hidden_state[idx] = left - 1
            if armable and op is e.arm_opcode:
                self.hidden_state[idx] = e.duration
        return rip


def _capture(m: Machine, effect_id: str):
    if effect_id == "flags":
        return m.rflags
    if effect_id == "rsp":
        return m.r[4]
    if effect_id == "pointers":
        return m.r[6], m.r[7]
    return m.r[2]


def _restore(m: Machine, effect_id: str, saved) -> None:
    if effect_id == "flags":
        m.rflags = saved
    elif effect_id == "rsp":
        m.r[4] = saved
    elif effect_id == "pointers":
        m.r[6], m.r[7] = saved
    else:
        m.r[2] = saved


def _flip(m: Machine, ins: Instr, bit: int) -> None:
    dst = destination(ins)
    w = 64 if isinstance(dst, Reg) and ins.opcode in (Op.MUL, Op.IMUL, Op.DIV) else ins.width
    if dst is None or bit >= w:
        return
    m.put(dst, w, m.get(dst, w) ^ (1 << bit))


class FaultBackend(InterpBackend):
    """An interpreter whose core misbehaves according to fault profiles."""

    def __init__(
        self, profiles: Iterable[FaultProfile], seed: int = 0,
        platform_id: str = INTERP_PLATFORM, core_id: int = 0,
        flags_mask: int = DEFAULT_FLAGS_MASK,
    ):
        super().__init__(platform_id, core_id, flags_mask)
        self.descriptor = BackendDescriptor(BackendKind.INTERP_FAULTED, platform_id, core_id)
        self.profiles = tuple(profiles)
        check_overlaps(self.profiles)
        self.seed = seed
        # Profiles that can ever fire on this core.
        self._local = [(i, p) for i, p in enumerate(self.profiles) if core_id in p.active_cores]
        self.counter = 0
        self.hidden_state: dict[int, int] = {}

    def reset(self) -> None:
        self.counter = 0
        self.hidden_state.clear()

    def active_profiles(self, counter: int) -> list[FaultProfile]:
        return [p for _, p in self._local if is_active(p, self.seed, counter)]

    def run(self, m: Machine, writable: list[tuple[int, int]], limits: Limits) -> RawEndState:
        counter = self.counter
        self.counter += 1
        if not self._local:
            return run_machine(m, writable, limits, False)[0]
        active = {id(p) for p in self.active_profiles(counter)}
        hidden = [
            (i, p.effect, id(p) in active) for i, p in self._local
            if isinstance(p.effect, HiddenStateMiscompute)
        ]
        hidden = [h for h in hidden if h[2] or self.hidden_state.get(h[0], 0) > 0]
        plain = [p for _, p in self._local if id(p) in active and not isinstance(p.effect, HiddenStateMiscompute)]
        if not plain and not hidden:
            return run_machine(m, writable, limits, False)[0]
        for p in plain:
            if isinstance(p.effect, RepUndershoot):
                m.rep_min_undershoot = p.effect.min_count
        m.effects = _Effects(plain, hidden, self.hidden_state)
        return run_machine(m, writable, limits, False)[0]

    def __repr__(self) -> str:
        names = ",".join(p.name for p in self.profiles)
        return f"FaultBackend([{names}], seed={self.seed}, core={self.descriptor.core_id})"


def make_fault_backend(
    base: InterpBackend, profiles: Iterable[FaultProfile], seed: int,
) -> FaultBackend:
    """Wrap ``base``'s platform, core and mask with fault injection."""
    d = base.descriptor
    return FaultBackend(profiles, seed, d.platform_id, d.core_id, base.flags_mask)
