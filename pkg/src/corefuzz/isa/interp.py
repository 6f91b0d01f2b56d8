"""Deterministic reference interpreter for the instruction subset.

The interpreter models what a Linux user process observes: which signal the
snapshot stops with, the fault address the kernel would report, and the
register file at the stop point.  Coverage features are collected while
executing so the interpreter doubles as a fuzzing proxy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

from ..snapshot import (
    MASK64, PAGE_SIZE, PERM_W, PERM_X, RFLAGS_FIXED_ONE, RegisterState, Signal,
    SignalRecord, Snapshot,
)
from .decoder import (
    JCC_SET, MAX_INSN_LEN, RBP, RSP, DecodeError, DecodeErrorKind, Imm, Instr, Mem,
    Op, Reg, decode_one,
)

FEAT_INSN = 0x01000000
FEAT_BRANCH = 0x02000000
FEAT_EDGE = 0x03000000
FEAT_DECODE_ERR = 0x04000000
FEAT_OPERAND_FORM = 0x05000000

# Simulated CPU cost model; keeps time-to-failure machine independent.
EXEC_OVERHEAD_MS = 0.05
INSTR_COST_MS = 0.001

# State order (rax, rbx, rcx, rdx, rsi, rdi, rbp, rsp, r8..) -> x86 encoding order.
STATE_TO_ENC = (0, 3, 1, 2, 6, 7, 5, 4, 8, 9, 10, 11, 12, 13, 14, 15)
ENC_TO_STATE = tuple(STATE_TO_ENC.index(i) for i in range(16))

CF, PF, AF, ZF, SF, DF, OF = 1, 4, 16, 64, 128, 1024, 2048
ARITH_FLAGS = CF | PF | AF | ZF | SF | OF
_M = {8: 0xFF, 16: 0xFFFF, 64: MASK64}
_SIGN = {8: 7, 16: 15, 64: 63}
PARITY = tuple(PF if bin(i).count("1") % 2 == 0 else 0 for i in range(256))

_NONCANON_LO = 1 << 47
_NONCANON_HI = (1 << 64) - (1 << 47)


def cpu_time_ms(instr_count: int) -> float:
    return EXEC_OVERHEAD_MS + instr_count * INSTR_COST_MS


@dataclass(frozen=True)
class Limits:
    max_instrs: int = 10_000
    max_cpu_ms: float = 3000.0

    def instr_budget(self) -> int:
        by_time = int((self.max_cpu_ms - EXEC_OVERHEAD_MS) / INSTR_COST_MS)
        return max(0, min(self.max_instrs, by_time))


@dataclass(frozen=True)
class RawEndState:
    registers: RegisterState
    writable_memory: tuple[tuple[int, bytes], ...]
    signal: SignalRecord
    instr_count: int


class ExecutionTimeout(Exception):
    def __init__(self, instr_count: int, coverage: frozenset[int] = frozenset()):
        super().__init__(f"instruction budget exhausted after {instr_count} instructions")
        self.instr_count = instr_count
        self.coverage = coverage


class Fault(Exception):
    """A CPU exception, reported as the signal a user process would receive."""

    def __init__(self, signal: Signal, addr: int = 0):
        super().__init__(signal.name, addr)
        self.signal = signal
        self.addr = addr


def _noncanonical(addr: int) -> bool:
    return _NONCANON_LO <= addr < _NONCANON_HI


class Memory:
    """Page-granular address space with x86 user-mode permission rules.

    Any mapped page is readable (W and X imply R on x86).
    """

    def __init__(self) -> None:
        self.pages: dict[int, bytearray] = {}
        self.perms: dict[int, int] = {}
        self.rpages: dict[int, bytearray] = {}
        self.wpages: dict[int, bytearray] = {}
        self.xpages: dict[int, bytearray] = {}
        # Decoded instructions by address, for code no store can reach.
        self.icache: dict[int, tuple] = {}

    def invalidate(self) -> None:
        self.icache.clear()

    def map(self, start: int, data: bytes, perms: int) -> None:
        for off in range(0, len(data), PAGE_SIZE):
            page = bytearray(data[off:off + PAGE_SIZE])
            base = start + off
            self.pages[base] = page
            self.set_perms(base, perms)

    def set_perms(self, base: int, perms: int) -> None:
        page = self.pages[base]
        self.perms[base] = perms
        self.icache.clear()
        for table, ok in (
            (self.rpages, perms != 0), (self.wpages, perms & PERM_W), (self.xpages, perms & PERM_X),
        ):
            if ok:
                table[base] = page
            else:
                table.pop(base, None)

    def _check(self, addr: int, size: int, table: dict, stack: bool) -> None:
        addrs = [(addr + k) & MASK64 for k in range(size)]
        if any(_noncanonical(a) for a in addrs):
            raise Fault(Signal.BUS if stack else Signal.SEGV, 0)
        for a in addrs:
            if (a & ~0xFFF) not in table:
                raise Fault(Signal.SEGV, a)

    def read(self, addr: int, size: int, stack: bool = False) -> int:
        off = addr & 0xFFF
        if off + size <= PAGE_SIZE:
            page = self.rpages.get(addr - off)
            if page is not None:
                return int.from_bytes(page[off:off + size], "little")
        self._check(addr, size, self.rpages, stack)
        return int.from_bytes(
            bytes(self.rpages[(addr + k) & MASK64 & ~0xFFF][(addr + k) & 0xFFF] for k in range(size)),
            "little",
        )

    def write(self, addr: int, size: int, value: int, stack: bool = False) -> None:
        off = addr & 0xFFF
        if off + size <= PAGE_SIZE:
            page = self.wpages.get(addr - off)
            if page is not None:
                page[off:off + size] = value.to_bytes(size, "little")
                return
        self._check(addr, size, self.wpages, stack)
        for k, byte in enumerate(value.to_bytes(size, "little")):
            a = (addr + k) & MASK64
            self.wpages[a & ~0xFFF][a & 0xFFF] = byte

    def fetch(self, rip: int) -> tuple[bytes, int]:
        """Up to 15 executable bytes at ``rip`` and the first unfetchable address."""
        off = rip & 0xFFF
        page = self.xpages.get(rip - off)
        if page is None:
            return b"", rip
        if off <= PAGE_SIZE - MAX_INSN_LEN:
            return bytes(page[off:off + MAX_INSN_LEN]), 0
        head = bytes(page[off:])
        nxt = rip - off + PAGE_SIZE
        page2 = self.xpages.get(nxt)
        if page2 is None:
            return head, nxt
        return head + bytes(page2[:MAX_INSN_LEN - len(head)]), 0


Handler = Callable[["Machine", Instr, int], int]
_DECODE_CACHE: dict[bytes, tuple] = {}
_DECODE_CACHE_MAX = 500_000


def _decode_cached(window: bytes) -> tuple:
    """(instr, handler, insn_feature) or (DecodeError,) for a fetch window."""
    hit = _DECODE_CACHE.get(window)
    if hit is not None:
        return hit
    try:
        ins = decode_one(window)
        entry: tuple = (ins, HANDLERS[ins.opcode], FEAT_INSN | ins.opcode << 8 | ins.prefix_bits)
    except DecodeError as e:
        entry = (e,)
    if len(_DECODE_CACHE) >= _DECODE_CACHE_MAX:
        _DECODE_CACHE.clear()
    _DECODE_CACHE[window] = entry
    return entry


class Machine:
    """Architectural state plus the fetch/execute loop."""

    def __init__(self, regs: RegisterState, mem: Memory):
        self.r = [regs.gpr[ENC_TO_STATE[i]] for i in range(16)]
        self.rip = regs.rip
        self.rflags = regs.rflags
        self.mem = mem
        self.nrip = 0
        self.icount = 0
        self.budget = 0
        self.effects = None  # fault-injection hooks, see backends
        self.rep_min_undershoot: int | None = None
        # outcome of the last conditional branch, for branch coverage
        self.taken = False

    @classmethod
    def from_snapshot(cls, s: Snapshot) -> Machine:
        mem = Memory()
        for m in s.mappings:
            mem.map(m.start, m.data, m.perms)
        return cls(s.registers, mem)

    def registers(self) -> RegisterState:
        return RegisterState(
            tuple(self.r[STATE_TO_ENC[i]] for i in range(16)), self.rip, self.rflags
        )

    # -- operand access ---------------------------------------------------
    def ea(self, o: Mem) -> int:
        if o.rip:
            a = self.nrip + o.disp
        else:
            a = o.disp
            if o.base is not None:
                a += self.r[o.base]
            if o.index is not None:
                a += self.r[o.index] * o.scale
        return a & MASK64

    def get(self, o, w: int) -> int:
        t = type(o)
        if t is Reg:
            return self.r[o.n] & _M[w]
        if t is Imm:
            return o.value & _M[w]
        return self.mem.read(self.ea(o), w >> 3, o.base in (RSP, RBP))

    def put(self, o, w: int, v: int) -> None:
        if type(o) is Reg:
            if w == 64:
                self.r[o.n] = v
            else:
                self.r[o.n] = (self.r[o.n] & ~_M[w] & MASK64) | v
        else:
            self.mem.write(self.ea(o), w >> 3, v, o.base in (RSP, RBP))

    def set_flags(self, cf: int, r: int, w: int, of: int) -> None:
        self.rflags = (
            (self.rflags & ~ARITH_FLAGS)
            | cf
            | PARITY[r & 0xFF]
            | (ZF if r == 0 else 0)
            | (r >> _SIGN[w] & 1) << 7
            | of << 11
        )

    # -- execution --------------------------------------------------------
    def run(self, budget: int, cov: set | None = None) -> SignalRecord:
        """Execute until a stop; raises ExecutionTimeout when ``budget`` runs out."""
        self.budget = budget
        mem = self.mem
        icache, wpages = mem.icache, mem.wpages
        prev = 0
        effects = self.effects
        int3, jccs = Op.INT3, JCC_SET
        track = cov is not None
        add = cov.add if track else None
        while True:
            if self.icount >= self.budget:
                raise ExecutionTimeout(self.icount)
            rip = self.rip
            entry = icache.get(rip)
            if entry is None:
                window, bad = mem.fetch(rip)
                if not window:
                    raise Fault(Signal.SEGV, 0 if _noncanonical(rip) else rip)
                entry = _decode_cached(window)
                if len(entry) == 1:
                    err = entry[0]
                    if cov is not None:
                        cov.add(FEAT_DECODE_ERR | err.kind)
                    if err.kind is DecodeErrorKind.TRUNCATED and bad:
                        raise Fault(Signal.SEGV, 0 if _noncanonical(bad) else bad)
                    raise Fault(Signal.ILL, 0)
                last = rip + len(window) - 1
                if (rip & ~0xFFF) not in wpages and (last & ~0xFFF) not in wpages:
                    icache[rip] = entry
            ins, handler, feat = entry
            op = ins.opcode
            if track:
                add(feat)
                add(FEAT_EDGE | prev << 8 | op)
                prev = op
            self.nrip = nrip = (rip + ins.length) & MASK64
            self.icount += 1
            if effects is None:
                self.rip = handler(self, ins, nrip)
            else:
                self.rip = effects.step(self, ins, handler, nrip)
            if op in jccs:
                if track:
                    add(FEAT_BRANCH | op << 1 | self.taken)
            elif op is int3:
                return SignalRecord(Signal.TRAP, 0)


def interp_run(
    snapshot: Snapshot,
    limits: Limits = Limits(),
    collect_coverage: bool = False,
    effects=None,
) -> tuple[RawEndState, frozenset[int]]:
    """Run ``snapshot`` to its stop point; see ``run_machine``."""
    m = Machine.from_snapshot(snapshot)
    m.effects = effects
    writable = [(x.start, x.num_bytes) for x in snapshot.mappings if x.perms & PERM_W]
    return run_machine(m, writable, limits, collect_coverage)


def run_machine(
    m: Machine,
    writable: Iterable[tuple[int, int]],
    limits: Limits,
    collect_coverage: bool,
) -> tuple[RawEndState, frozenset[int]]:
    cov: set[int] | None = set() if collect_coverage else None
    try:
        sig = m.run(limits.instr_budget(), cov)
    except Fault as f:
        sig = SignalRecord(f.signal, f.addr if f.signal in (Signal.SEGV, Signal.BUS) else 0)
    except ExecutionTimeout as t:
        raise ExecutionTimeout(t.instr_count, frozenset(cov or ())) from None
    mem = tuple(
        (start, b"".join(bytes(m.mem.pages[start + o]) for o in range(0, n, PAGE_SIZE)))
        for start, n in writable
    )
    return RawEndState(m.registers(), mem, sig, m.icount), frozenset(cov or ())


PROXY_CODE_BASE = 0x10000000
PROXY_DATA_BASE = 0x20000000
PROXY_DATA_PAGES = 4
_ZERO_DATA = bytes(PROXY_DATA_PAGES * PAGE_SIZE)


def run_code(code: bytes, limits: Limits, base: int = PROXY_CODE_BASE) -> tuple[RawEndState, frozenset[int]]:
    """Fuzzing-proxy entry: ``code`` + INT3 at ``base`` (r-x) plus a zeroed rw
    data window, run with coverage collection."""
    mem = Memory()
    page = (code + b"\xcc").ljust(-(-(len(code) + 1) // PAGE_SIZE) * PAGE_SIZE, b"\0")
    mem.map(base, page, 5)
    mem.map(PROXY_DATA_BASE, _ZERO_DATA, 3)
    m = Machine(RegisterState(rip=base, rflags=RFLAGS_FIXED_ONE), mem)
    return run_machine(m, (), limits, True)


# -- instruction semantics ----------------------------------------------------

def _nop(m: Machine, ins: Instr, nrip: int) -> int:
    return nrip


def _int3(m: Machine, ins: Instr, nrip: int) -> int:
    # The end state reports rip at the trap byte itself.
    return (nrip - 1) & MASK64


def _hlt(m: Machine, ins: Instr, nrip: int) -> int:
    raise Fault(Signal.SEGV, 0)


def _ud2(m: Machine, ins: Instr, nrip: int) -> int:
    raise Fault(Signal.ILL, 0)


def _mov(m: Machine, ins: Instr, nrip: int) -> int:
    w = ins.width
    d, s = ins.operands
    m.put(d, w, m.get(s, w))
    return nrip


def _lea(m: Machine, ins: Instr, nrip: int) -> int:
    m.r[ins.operands[0].n] = m.ea(ins.operands[1])
    return nrip


def _add(m: Machine, ins: Instr, nrip: int) -> int:
    w = ins.width
    d, s = ins.operands
    a, b = m.get(d, w), m.get(s, w)
    r = a + b
    cf = r >> w
    r &= _M[w]
    m.put(d, w, r)
    m.set_flags(cf, r, w, ((a ^ r) & (b ^ r)) >> _SIGN[w] & 1)
    return nrip


def _sub_common(m: Machine, ins: Instr, store: bool) -> None:
    w = ins.width
    d, s = ins.operands
    a, b = m.get(d, w), m.get(s, w)
    r = (a - b) & _M[w]
    if store:
        m.put(d, w, r)
    m.set_flags(1 if a < b else 0, r, w, ((a ^ b) & (a ^ r)) >> _SIGN[w] & 1)


def _sub(m: Machine, ins: Instr, nrip: int) -> int:
    _sub_common(m, ins, True)
    return nrip


def _cmp(m: Machine, ins: Instr, nrip: int) -> int:
    _sub_common(m, ins, False)
    return nrip


def _logic(fn: Callable[[int, int], int], store: bool) -> Handler:
    def h(m: Machine, ins: Instr, nrip: int) -> int:
        w = ins.width
        d, s = ins.operands
        r = fn(m.get(d, w), m.get(s, w))
        if store:
            m.put(d, w, r)
        m.set_flags(0, r, w, 0)
        return nrip
    return h


def _incdec(delta: int) -> Handler:
    def h(m: Machine, ins: Instr, nrip: int) -> int:
        w = ins.width
        d = ins.operands[0]
        a = m.get(d, w)
        r = (a + delta) & _M[w]
        m.put(d, w, r)
        top = 1 << _SIGN[w]
        of = 1 if (r == top if delta == 1 else a == top) else 0
        cf = m.rflags & CF
        m.set_flags(cf, r, w, of)
        return nrip
    return h


def _shift(kind: str) -> Handler:
    def h(m: Machine, ins: Instr, nrip: int) -> int:
        w = ins.width
        d, cnt = ins.operands
        c = cnt.value & (0x3F if w == 64 else 0x1F)
        a = m.get(d, w)
        if c == 0:
            m.put(d, w, a)
            return nrip
        msb = _SIGN[w]
        if kind == "shl":
            r = (a << c) & _M[w]
            cf = (a << (c - 1)) >> msb & 1
            # OF is only defined for 1-bit shifts; hardware computes it from
            # the top two source bits whatever the count.
            of = (a >> msb ^ a >> (msb - 1)) & 1
        elif kind == "shr":
            r = a >> c
            cf = (a >> (c - 1)) & 1
            of = a >> msb & 1
        else:
            sa = a - (1 << w) if a >> msb & 1 else a
            r = (sa >> c) & _M[w]
            cf = (sa >> (c - 1)) & 1
            of = 0
        m.put(d, w, r)
        m.set_flags(cf, r, w, of)
        return nrip
    return h


def _mul(m: Machine, ins: Instr, nrip: int) -> int:
    src = m.get(ins.operands[0], 64)
    p = m.r[0] * src
    m.r[0], m.r[2] = p & MASK64, p >> 64
    hi = 1 if p >> 64 else 0
    _mul_flags(m, hi)
    return nrip


def _mul_flags(m: Machine, ov: int) -> None:
    # SF/ZF/AF/PF are architecturally undefined after MUL/IMUL; this follows
    # what Intel family-6 parts measurably do: SF and PF from the low half,
    # ZF and AF cleared.
    lo = m.r[0]
    m.rflags = (m.rflags & ~ARITH_FLAGS) | ov | ov << 11 | PARITY[lo & 0xFF] | (lo >> 63) << 7


def _imul(m: Machine, ins: Instr, nrip: int) -> int:
    src = m.get(ins.operands[0], 64)
    a = m.r[0] - (1 << 64) if m.r[0] >> 63 else m.r[0]
    b = src - (1 << 64) if src >> 63 else src
    p = a * b
    m.r[0], m.r[2] = p & MASK64, (p >> 64) & MASK64
    ov = 0 if -(1 << 63) <= p < 1 << 63 else 1
    _mul_flags(m, ov)
    return nrip


def _div(m: Machine, ins: Instr, nrip: int) -> int:
    src = m.get(ins.operands[0], 64)
    if src == 0:
        raise Fault(Signal.FPE, 0)
    n = m.r[2] << 64 | m.r[0]
    q, rem = divmod(n, src)
    if q > MASK64:
        raise Fault(Signal.FPE, 0)
    m.r[0], m.r[2] = q, rem
    return nrip


def _push(m: Machine, ins: Instr, nrip: int) -> int:
    v = m.r[ins.operands[0].n]
    sp = (m.r[RSP] - 8) & MASK64
    m.mem.write(sp, 8, v, True)
    m.r[RSP] = sp
    return nrip


def _pop(m: Machine, ins: Instr, nrip: int) -> int:
    sp = m.r[RSP]
    v = m.mem.read(sp, 8, True)
    m.r[RSP] = (sp + 8) & MASK64
    m.r[ins.operands[0].n] = v
    return nrip


def _jump_to(m: Machine, target: int) -> int:
    target &= MASK64
    if _noncanonical(target):
        raise Fault(Signal.SEGV, 0)
    return target


def _jmp(m: Machine, ins: Instr, nrip: int) -> int:
    return _jump_to(m, nrip + ins.operands[0].value)


def _cond(op: Op, f: int) -> bool:
    k = op - Op.JO
    base = k >> 1
    if base == 0:
        t = f & OF
    elif base == 1:
        t = f & CF
    elif base == 2:
        t = f & ZF
    elif base == 3:
        t = f & (CF | ZF)
    elif base == 4:
        t = f & SF
    elif base == 5:
        t = f & PF
    elif base == 6:
        t = bool(f & SF) != bool(f & OF)
    else:
        t = (f & ZF) or (bool(f & SF) != bool(f & OF))
    return bool(t) != bool(k & 1)


def _unpack_flags(i: int) -> int:
    """Inverse of the packing in _jcc: CF, PF, ZF, SF, OF as bits 0..4."""
    return (CF if i & 1 else 0) | (PF if i & 2 else 0) | (ZF if i & 4 else 0) | (SF if i & 8 else 0) | (
        OF if i & 16 else 0
    )


# _cond precomputed for every combination of the flags it reads
_COND_TABLE = {op: tuple(_cond(op, _unpack_flags(i)) for i in range(32)) for op in JCC_SET}


def _jcc(m: Machine, ins: Instr, nrip: int) -> int:
    f = m.rflags
    m.taken = taken = _COND_TABLE[ins.opcode][(f & 1) | (f >> 1 & 2) | (f >> 4 & 12) | (f >> 7 & 16)]
    if taken:
        return _jump_to(m, nrip + ins.operands[0].value)
    return nrip


def _string(store: bool) -> Handler:
    def h(m: Machine, ins: Instr, nrip: int) -> int:
        r, mem = m.r, m.mem
        step = -1 if m.rflags & DF else 1
        if not ins.rep:
            _string_unit(m, mem, r, store, step)
            return nrip
        undershoot = m.rep_min_undershoot is not None and r[1] >= m.rep_min_undershoot
        todo = r[1] - 1 if undershoot else r[1]
        while todo:
            if m.icount >= m.budget:
                raise ExecutionTimeout(m.icount)
            _string_unit(m, mem, r, store, step)
            r[1] = (r[1] - 1) & MASK64
            todo -= 1
            m.icount += 1
        r[1] = 0
        return nrip
    return h


def _string_unit(m: Machine, mem: Memory, r: list, store: bool, step: int) -> None:
    v = r[0] & 0xFF if store else mem.read(r[6], 1)
    mem.write(r[7], 1, v)
    if not store:
        r[6] = (r[6] + step) & MASK64
    r[7] = (r[7] + step) & MASK64


HANDLERS: dict[Op, Handler] = {
    Op.NOP: _nop, Op.INT3: _int3, Op.HLT: _hlt, Op.UD2: _ud2,
    Op.MOV_RI: _mov, Op.MOV_MR: _mov, Op.MOV_RM: _mov, Op.LEA: _lea,
    Op.ADD_MR: _add, Op.ADD_RM: _add, Op.SUB_MR: _sub, Op.SUB_RM: _sub,
    Op.CMP_MR: _cmp, Op.CMP_RM: _cmp,
    Op.XOR_MR: _logic(lambda a, b: a ^ b, True), Op.XOR_RM: _logic(lambda a, b: a ^ b, True),
    Op.AND_MR: _logic(lambda a, b: a & b, True), Op.AND_RM: _logic(lambda a, b: a & b, True),
    Op.OR_MR: _logic(lambda a, b: a | b, True), Op.OR_RM: _logic(lambda a, b: a | b, True),
    Op.TEST: _logic(lambda a, b: a & b, False),
    Op.INC: _incdec(1), Op.DEC: _incdec(-1),
    Op.SHL: _shift("shl"), Op.SHR: _shift("shr"), Op.SAR: _shift("sar"),
    Op.MUL: _mul, Op.IMUL: _imul, Op.DIV: _div,
    Op.PUSH: _push, Op.POP: _pop, Op.JMP8: _jmp, Op.JMP32: _jmp,
    Op.MOVSB: _string(False), Op.STOSB: _string(True),
}
HANDLERS.update({op: _jcc for op in JCC_SET})

# Instructions whose execution writes the arithmetic flags (shifts only when
# the masked count is nonzero; see ``writes_flags``).
FLAG_WRITERS = frozenset({
    Op.ADD_MR, Op.ADD_RM, Op.SUB_MR, Op.SUB_RM, Op.CMP_MR, Op.CMP_RM,
    Op.XOR_MR, Op.XOR_RM, Op.AND_MR, Op.AND_RM, Op.OR_MR, Op.OR_RM, Op.TEST,
    Op.INC, Op.DEC, Op.SHL, Op.SHR, Op.SAR, Op.MUL, Op.IMUL,
})


def writes_flags(ins: Instr) -> bool:
    if ins.opcode not in FLAG_WRITERS:
        return False
    if ins.opcode in (Op.SHL, Op.SHR, Op.SAR):
        return bool(ins.operands[1].value & (0x3F if ins.width == 64 else 0x1F))
    return True


def destination(ins: Instr):
    """Operand receiving an instruction's primary result, or None."""
    op = ins.opcode
    if op in (Op.MUL, Op.IMUL, Op.DIV):
        return Reg(0)
    if op in (Op.CMP_MR, Op.CMP_RM, Op.TEST) or not ins.operands:
        return None
    if op in (Op.PUSH, Op.JMP8, Op.JMP32) or op in JCC_SET:
        return None
    return ins.operands[0]


def source(ins: Instr):
    """Operand a bit-trigger predicate inspects."""
    if ins.opcode in (Op.MUL, Op.IMUL, Op.DIV, Op.INC, Op.DEC, Op.PUSH):
        return ins.operands[0]
    if len(ins.operands) == 2:
        return ins.operands[1]
    return None


def decoder_features(data: bytes) -> tuple[frozenset[int], int]:
    """Decode-path coverage for the decoder proxy: (features, instrs decoded)."""
    feats: set[int] = set()
    off, n = 0, 0
    while off < len(data):
        try:
            ins = decode_one(data[off:off + MAX_INSN_LEN])
        except DecodeError as e:
            feats.add(FEAT_DECODE_ERR | e.kind)
            feats.add(FEAT_DECODE_ERR | e.kind << 8 | data[off])
            break
        n += 1
        feats.add(FEAT_INSN | ins.opcode << 8 | ins.prefix_bits)
        mem = next((o for o in ins.operands if isinstance(o, Mem)), None)
        form = 0
        if mem is not None:
            form = 1 | mem.disp_size << 1 | mem.sib << 4 | mem.rip << 5 | (mem.index is not None) << 6
        elif any(isinstance(o, Reg) for o in ins.operands):
            form = 0x80
        feats.add(FEAT_OPERAND_FORM | ins.opcode << 8 | form)
        off += ins.length
        if ins.opcode is Op.INT3:
            break
    return frozenset(feats), n
