"""Decoder and encoder for the x86_64 instruction subset.

Decoding is byte-at-a-time and never looks past index 14 of its input, so it
behaves like a hardware length decoder fed a 15-byte window.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Union

MAX_INSN_LEN = 15

P66, PF3, PF2 = 0x66, 0xF3, 0xF2
LEGACY_PREFIXES = (P66, PF2, PF3)  # canonical emission order
_OTHER_PREFIXES = frozenset({0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65, 0x67, 0xF0})

REG_NAMES = (
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)
RSP, RBP = 4, 5


class Op(enum.IntEnum):
    NOP = 1
    INT3 = 2
    HLT = 3
    UD2 = 4
    MOV_RI = 5
    MOV_MR = 6
    MOV_RM = 7
    ADD_MR = 8
    ADD_RM = 9
    SUB_MR = 10
    SUB_RM = 11
    XOR_MR = 12
    XOR_RM = 13
    AND_MR = 14
    AND_RM = 15
    OR_MR = 16
    OR_RM = 17
    CMP_MR = 18
    CMP_RM = 19
    TEST = 20
    LEA = 21
    INC = 22
    DEC = 23
    SHL = 24
    SHR = 25
    SAR = 26
    MUL = 27
    IMUL = 28
    DIV = 29
    PUSH = 30
    POP = 31
    JMP8 = 32
    JMP32 = 33
    MOVSB = 34
    STOSB = 35
    JO = 36
    JNO = 37
    JB = 38
    JAE = 39
    JE = 40
    JNE = 41
    JBE = 42
    JA = 43
    JS = 44
    JNS = 45
    JP = 46
    JNP = 47
    JL = 48
    JGE = 49
    JLE = 50
    JG = 51


JCC_OPS = tuple(Op(Op.JO + i) for i in range(16))
JCC_SET = frozenset(JCC_OPS)

# opcode byte -> (MR/RM op) for the two-operand ModRM forms
ALU_OPCODES = {
    0x01: Op.ADD_MR, 0x03: Op.ADD_RM,
    0x29: Op.SUB_MR, 0x2B: Op.SUB_RM,
    0x31: Op.XOR_MR, 0x33: Op.XOR_RM,
    0x21: Op.AND_MR, 0x23: Op.AND_RM,
    0x09: Op.OR_MR, 0x0B: Op.OR_RM,
    0x39: Op.CMP_MR, 0x3B: Op.CMP_RM,
    0x85: Op.TEST,
    0x89: Op.MOV_MR, 0x8B: Op.MOV_RM,
}
RM_DEST_OPS = frozenset(
    {Op.ADD_RM, Op.SUB_RM, Op.XOR_RM, Op.AND_RM, Op.OR_RM, Op.CMP_RM, Op.MOV_RM}
)
GROUP_OPCODES = {
    (0xFF, 0): Op.INC, (0xFF, 1): Op.DEC,
    (0xC1, 4): Op.SHL, (0xC1, 5): Op.SHR, (0xC1, 7): Op.SAR,
    (0xF7, 4): Op.MUL, (0xF7, 5): Op.IMUL, (0xF7, 6): Op.DIV,
}
OPCODE_BYTES: dict[Op, tuple[int, ...]] = {op: (b,) for b, op in ALU_OPCODES.items()}
OPCODE_BYTES.update({op: (b,) for (b, _), op in GROUP_OPCODES.items()})
OPCODE_BYTES.update({
    Op.NOP: (0x90,), Op.INT3: (0xCC,), Op.HLT: (0xF4,), Op.UD2: (0x0F, 0x0B),
    Op.LEA: (0x8D,), Op.JMP8: (0xEB,), Op.JMP32: (0xE9,),
    Op.MOVSB: (0xA4,), Op.STOSB: (0xAA,),
})
GROUP_REG = {op: r for (_, r), op in GROUP_OPCODES.items()}

MODRM_OPS = frozenset(ALU_OPCODES.values()) | frozenset(GROUP_OPCODES.values()) | {Op.LEA}
WIDTH16_OPS = (frozenset(ALU_OPCODES.values()) | {Op.INC, Op.DEC, Op.SHL, Op.SHR, Op.SAR})
STRING_OPS = frozenset({Op.MOVSB, Op.STOSB})


class DecodeErrorKind(enum.IntEnum):
    EMPTY_INPUT = 1
    TOO_LONG = 2
    UNSUPPORTED = 3
    TRUNCATED = 4


class DecodeError(Exception):
    def __init__(self, kind: DecodeErrorKind, examined: int, offset: int = 0):
        super().__init__(f"{kind.name} after {examined} byte(s) at offset {offset}")
        self.kind = kind
        self.examined = examined
        self.offset = offset


class IllegalInstruction(ValueError):
    """An Instr that is not a legal entry of the subset model."""


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self) -> str:
        return REG_NAMES[self.n]


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return hex(self.value)


@dataclass(frozen=True)
class Mem:
    """A memory operand; ``disp_size``/``sib`` pin the exact encoding."""

    base: int | None
    disp: int = 0
    index: int | None = None
    scale: int = 1
    disp_size: int = 0
    sib: bool = False
    rip: bool = False

    def __str__(self) -> str:
        parts = []
        if self.rip:
            parts.append("rip")
        elif self.base is not None:
            parts.append(REG_NAMES[self.base])
        if self.index is not None:
            parts.append(f"{REG_NAMES[self.index]}*{self.scale}")
        if self.disp or not parts:
            parts.append(hex(self.disp))
        return "[" + "+".join(parts) + "]"


Operand = Union[Reg, Imm, Mem]


@dataclass(frozen=True)
class Instr:
    opcode: Op
    rex: int | None = None
    prefixes: frozenset[int] = frozenset()
    operands: tuple[Operand, ...] = ()
    length: int = 0
    raw: bytes = b""

    @property
    def width(self) -> int:
        if self.opcode in STRING_OPS:
            return 8
        if self.opcode in WIDTH16_OPS and P66 in self.prefixes and not _rex_w(self.rex):
            return 16
        return 64

    @property
    def prefix_bits(self) -> int:
        """Prefix bitmask used for coverage features."""
        b = 0
        if P66 in self.prefixes:
            b |= 1
        if PF3 in self.prefixes:
            b |= 2
        if PF2 in self.prefixes:
            b |= 4
        if self.rex is not None:
            b |= 8 | (self.rex & 0xF) << 4
        return b

    @property
    def rep(self) -> bool:
        return bool(self.prefixes & {PF2, PF3})

    def __str__(self) -> str:
        name = self.opcode.name.split("_")[0].lower()
        if self.opcode in STRING_OPS and self.rep:
            name = ("repne " if PF2 in self.prefixes else "rep ") + name
        ops = ", ".join(_fmt_operand(o, self.width) for o in self.operands)
        return f"{name} {ops}".strip()


def _fmt_operand(o: Operand, width: int) -> str:
    if isinstance(o, Reg) and width == 16:
        return REG_NAMES[o.n] + "w" if o.n >= 8 else REG_NAMES[o.n][1:]
    return str(o)


def _rex_w(rex: int | None) -> bool:
    return rex is not None and bool(rex & 8)


def _sx(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


class _Cursor:
    __slots__ = ("data", "n", "i")

    def __init__(self, data: Sequence[int]):
        self.data = data
        self.n = len(data)
        self.i = 0

    def take(self) -> int:
        i = self.i
        if i >= MAX_INSN_LEN:
            raise DecodeError(DecodeErrorKind.TOO_LONG, i)
        if i >= self.n:
            raise DecodeError(DecodeErrorKind.TRUNCATED, i)
        self.i = i + 1
        return self.data[i]

    def take_le(self, size: int) -> int:
        v = 0
        for k in range(size):
            v |= self.take() << (8 * k)
        return v

    def unsupported(self) -> DecodeError:
        return DecodeError(DecodeErrorKind.UNSUPPORTED, self.i)


def _decode_modrm(cur: _Cursor, rex: int) -> tuple[int, int, Operand]:
    """Returns (mod, reg field incl. REX.R, r/m operand)."""
    modrm = cur.take()
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    reg |= (rex & 4) << 1
    if mod == 3:
        return mod, reg, Reg(rm | (rex & 1) << 3)
    if rm == 4:
        sib = cur.take()
        scale = 1 << (sib >> 6)
        index = ((sib >> 3) & 7) | (rex & 2) << 2
        base_lo = sib & 7
        idx = None if index == RSP else index
        if base_lo == 5 and mod == 0:
            return mod, reg, Mem(None, _sx(cur.take_le(4), 32), idx, scale, 4, True)
        base = base_lo | (rex & 1) << 3
        dsize = (0, 1, 4)[mod]
        disp = _sx(cur.take_le(dsize), dsize * 8) if dsize else 0
        return mod, reg, Mem(base, disp, idx, scale, dsize, True)
    if rm == 5 and mod == 0:
        return mod, reg, Mem(None, _sx(cur.take_le(4), 32), None, 1, 4, False, True)
    dsize = (0, 1, 4)[mod]
    disp = _sx(cur.take_le(dsize), dsize * 8) if dsize else 0
    return mod, reg, Mem(rm | (rex & 1) << 3, disp, None, 1, dsize)


def decode_one(data: Sequence[int]) -> Instr:
    """Decode one instruction from the start of ``data``.

    Raises DecodeError (EMPTY_INPUT, TOO_LONG, UNSUPPORTED or TRUNCATED).
    """
    if len(data) == 0:
        raise DecodeError(DecodeErrorKind.EMPTY_INPUT, 0)
    cur = _Cursor(data)
    prefixes: set[int] = set()
    b = cur.take()
    while b in (P66, PF2, PF3):
        prefixes.add(b)
        b = cur.take()
    if b in _OTHER_PREFIXES:
        raise cur.unsupported()
    rex = None
    if 0x40 <= b <= 0x4F:
        rex = b
        b = cur.take()
        if 0x40 <= b <= 0x4F or b in (P66, PF2, PF3) or b in _OTHER_PREFIXES:
            raise cur.unsupported()
    rexv = rex or 0
    pfx = frozenset(prefixes)
    op: Op
    operands: tuple[Operand, ...] = ()

    def done() -> Instr:
        n = cur.i
        return Instr(op, rex, pfx, operands, n, bytes(data[k] for k in range(n)))

    if b in (0x90, 0xCC, 0xF4):
        if pfx or rex is not None:
            raise cur.unsupported()
        op = {0x90: Op.NOP, 0xCC: Op.INT3, 0xF4: Op.HLT}[b]
        return done()
    if b == 0x0F:
        if cur.take() != 0x0B:
            raise cur.unsupported()
        op = Op.UD2
        return done()
    if 0xB8 <= b <= 0xBF:
        if pfx or not rexv & 8:
            raise cur.unsupported()
        op = Op.MOV_RI
        operands = (Reg((b & 7) | (rexv & 1) << 3), Imm(cur.take_le(8)))
        return done()
    if 0x50 <= b <= 0x5F:
        if pfx:
            raise cur.unsupported()
        op = Op.PUSH if b < 0x58 else Op.POP
        operands = (Reg((b & 7) | (rexv & 1) << 3),)
        return done()
    if b in (0xEB, 0xE9) or 0x70 <= b <= 0x7F:
        if pfx or rex is not None:
            raise cur.unsupported()
        if b == 0xE9:
            op = Op.JMP32
            operands = (Imm(_sx(cur.take_le(4), 32)),)
        else:
            op = Op.JMP8 if b == 0xEB else Op(Op.JO + (b - 0x70))
            operands = (Imm(_sx(cur.take(), 8)),)
        return done()
    if b in (0xA4, 0xAA):
        if rex is not None or P66 in pfx or (PF2 in pfx and PF3 in pfx):
            raise cur.unsupported()
        op = Op.MOVSB if b == 0xA4 else Op.STOSB
        return done()

    if b in ALU_OPCODES or b in (0xFF, 0xC1, 0xF7, 0x8D):
        if pfx - {P66}:
            raise cur.unsupported()
        wide = bool(rexv & 8)
        if b in ALU_OPCODES:
            op = ALU_OPCODES[b]
            if not wide and P66 not in pfx:
                raise cur.unsupported()
            _, reg, rm = _decode_modrm(cur, rexv)
            operands = (Reg(reg), rm) if op in RM_DEST_OPS else (rm, Reg(reg))
            return done()
        if b == 0x8D:
            if not wide or pfx:
                raise cur.unsupported()
            mod, reg, rm = _decode_modrm(cur, rexv)
            if mod == 3:
                raise cur.unsupported()
            op = Op.LEA
            operands = (Reg(reg), rm)
            return done()
        # Group opcodes: the ModRM reg field selects the operation, so peek
        # at it before committing to an operand size.
        modrm_at = cur.i
        _, reg, rm = _decode_modrm(cur, rexv)
        sub = (reg & 7)
        key = (b, sub)
        if key not in GROUP_OPCODES:
            cur.i = modrm_at + 1
            raise cur.unsupported()
        op = GROUP_OPCODES[key]
        if op in (Op.MUL, Op.IMUL, Op.DIV):
            if not wide or pfx:
                raise cur.unsupported()
        elif not wide and P66 not in pfx:
            raise cur.unsupported()
        if b == 0xC1:
            operands = (rm, Imm(cur.take()))
        else:
            operands = (rm,)
        return done()
    raise cur.unsupported()


def decode_program(data: Sequence[int]) -> list[Instr]:
    """Greedily decode ``data``, stopping after INT3 or at the end of input.

    The first decode error is re-raised with its byte offset set.
    """
    out: list[Instr] = []
    off = 0
    buf = bytes(data)
    while off < len(buf):
        try:
            ins = decode_one(buf[off:off + MAX_INSN_LEN])
        except DecodeError as e:
            e.offset = off
            e.args = (f"{e.kind.name} after {e.examined} byte(s) at offset {off}",)
            raise
        out.append(ins)
        off += ins.length
        if ins.opcode is Op.INT3:
            break
    return out


def _required_rex(ins: Instr) -> int:
    """REX bits demanded by the operands (W, R, X, B as 8/4/2/1)."""
    return _rex_bits(ins.opcode, ins.width, ins.operands)


def _rex_bits(op: Op, width: int, operands: tuple[Operand, ...]) -> int:
    bits = 0
    if op is Op.MOV_RI or (op in MODRM_OPS and width == 64):
        bits |= 8
    for k, o in enumerate(operands):
        if isinstance(o, Reg) and o.n >= 8:
            if op in (Op.MOV_RI, Op.PUSH, Op.POP):
                bits |= 1
            elif _is_reg_field(op, k):
                bits |= 4
            else:
                bits |= 1
        elif isinstance(o, Mem):
            if o.base is not None and o.base >= 8:
                bits |= 1
            if o.index is not None and o.index >= 8:
                bits |= 2
    return bits


def _is_reg_field(op: Op, k: int) -> bool:
    if op in GROUP_OPCODES.values():
        return False
    if op in RM_DEST_OPS or op is Op.LEA:
        return k == 0
    return k == 1


def _check_legal(ins: Instr) -> None:
    op, pfx, ops, rex = ins.opcode, ins.prefixes, ins.operands, ins.rex
    if rex is not None and not 0x40 <= rex <= 0x4F:
        raise IllegalInstruction("rex byte out of range")
    if pfx - set(LEGACY_PREFIXES):
        raise IllegalInstruction("unknown prefix")
    kinds = tuple(type(o) for o in ops)

    def need(cond: bool, why: str) -> None:
        if not cond:
            raise IllegalInstruction(f"{op.name}: {why}")

    if op in (Op.NOP, Op.INT3, Op.HLT):
        need(not pfx and rex is None and not ops, "takes no prefixes or operands")
    elif op is Op.UD2:
        need(not ops, "takes no operands")
    elif op is Op.MOV_RI:
        need(not pfx and _rex_w(rex) and kinds == (Reg, Imm), "needs REX.W, reg, imm64")
        need(0 <= ops[1].value < 1 << 64, "imm64 out of range")
    elif op in (Op.PUSH, Op.POP):
        need(not pfx and kinds == (Reg,), "needs one register")
    elif op in JCC_SET or op in (Op.JMP8, Op.JMP32):
        need(not pfx and rex is None and kinds == (Imm,), "needs exactly one displacement")
        bits = 32 if op is Op.JMP32 else 8
        need(-(1 << bits - 1) <= ops[0].value < 1 << bits - 1, "displacement out of range")
    elif op in STRING_OPS:
        need(not ops and rex is None and pfx in (frozenset(), {PF2}, {PF3}), "bad prefixes")
    elif op in MODRM_OPS:
        need(not pfx - {P66}, "only 0x66 allowed")
        need(_rex_w(rex) or (P66 in pfx and op in WIDTH16_OPS), "needs REX.W or 16-bit form")
        if op in (Op.MUL, Op.IMUL, Op.DIV, Op.LEA):
            need(not pfx, "no operand-size prefix")
        if op is Op.LEA:
            need(kinds == (Reg, Mem), "needs reg, mem")
        elif op in (Op.SHL, Op.SHR, Op.SAR):
            need(len(ops) == 2 and kinds[0] in (Reg, Mem) and kinds[1] is Imm, "needs r/m, imm8")
            need(0 <= ops[1].value <= 0xFF, "imm8 out of range")
        elif op in GROUP_OPCODES.values():
            need(len(ops) == 1 and kinds[0] in (Reg, Mem), "needs one r/m operand")
        elif op in RM_DEST_OPS:
            need(len(ops) == 2 and kinds[0] is Reg and kinds[1] in (Reg, Mem), "needs reg, r/m")
        else:
            need(len(ops) == 2 and kinds[1] is Reg and kinds[0] in (Reg, Mem), "needs r/m, reg")
    else:  # pragma: no cover
        raise IllegalInstruction(f"unknown opcode {op!r}")

    for o in ops:
        if isinstance(o, Reg):
            need(0 <= o.n < 16, "register out of range")
        elif isinstance(o, Mem):
            _check_mem(o)
    req = _required_rex(ins)
    have = rex or 0
    need((have & req) == req, f"REX {have:#x} lacks required bits {req:#x}")
    # Bits that would change the meaning of an operand must match exactly.
    for bit in (4, 2, 1):
        if have & bit and not req & bit and _rex_bit_meaningful(ins, bit):
            raise IllegalInstruction(f"{op.name}: REX bit {bit} conflicts with operands")
    if op in MODRM_OPS and op not in (Op.MUL, Op.IMUL, Op.DIV, Op.LEA):
        # 66+REX.W is accepted (REX.W wins), REX without W needs 66.
        pass


def _rex_bit_meaningful(ins: Instr, bit: int) -> bool:
    op = ins.opcode
    if op in (Op.MOV_RI, Op.PUSH, Op.POP):
        return bit == 1
    if op not in MODRM_OPS:
        return False
    rm = next((o for o in ins.operands if isinstance(o, Mem)), None)
    if bit == 4:
        return op not in GROUP_OPCODES.values()
    if bit == 2:
        return rm is not None and rm.sib
    # bit == 1: REX.B extends r/m register or base (not for rip/no-base forms)
    if rm is None:
        return True
    return rm.base is not None


def _check_mem(m: Mem) -> None:
    if m.rip:
        if m.base is not None or m.index is not None or m.sib or m.disp_size != 4:
            raise IllegalInstruction("rip-relative operand has extra fields")
    elif m.sib:
        if m.scale not in (1, 2, 4, 8):
            raise IllegalInstruction("bad scale")
        if m.index == RSP:
            raise IllegalInstruction("rsp cannot be an index")
        if m.base is None:
            if m.disp_size != 4:
                raise IllegalInstruction("no-base SIB needs disp32")
        elif (m.base & 7) == RBP and m.disp_size == 0:
            raise IllegalInstruction("rbp/r13 base needs a displacement")
    else:
        if m.base is None:
            raise IllegalInstruction("memory operand needs a base (or SIB/rip)")
        if m.index is not None or m.scale != 1:
            raise IllegalInstruction("index requires SIB")
        if (m.base & 7) == RSP:
            raise IllegalInstruction("rsp/r12 base requires SIB")
        if (m.base & 7) == RBP and m.disp_size == 0:
            raise IllegalInstruction("rbp/r13 base needs a displacement")
    if m.disp_size not in (0, 1, 4):
        raise IllegalInstruction("bad displacement size")
    lim = {0: 0, 1: 7, 4: 31}[m.disp_size]
    if m.disp_size == 0 and m.disp != 0:
        raise IllegalInstruction("displacement without disp bytes")
    if m.disp_size and not -(1 << lim) <= m.disp < 1 << lim:
        raise IllegalInstruction("displacement out of range")


def _encode_modrm(reg: int, rm: Operand) -> bytes:
    reg &= 7
    if isinstance(rm, Reg):
        return bytes([0xC0 | reg << 3 | (rm.n & 7)])
    assert isinstance(rm, Mem)
    if rm.rip:
        return bytes([reg << 3 | 5]) + (rm.disp & 0xFFFFFFFF).to_bytes(4, "little")
    mod = {0: 0, 1: 1, 4: 2}[rm.disp_size]
    disp = (rm.disp & ((1 << 8 * rm.disp_size) - 1)).to_bytes(rm.disp_size, "little")
    if rm.sib:
        ss = (1, 2, 4, 8).index(rm.scale)
        idx = RSP if rm.index is None else rm.index & 7
        if rm.base is None:
            return bytes([reg << 3 | 4, ss << 6 | idx << 3 | 5]) + disp
        return bytes([mod << 6 | reg << 3 | 4, ss << 6 | idx << 3 | (rm.base & 7)]) + disp
    return bytes([mod << 6 | reg << 3 | (rm.base & 7)]) + disp


def encode(ins: Instr, validate: bool = True) -> bytes:
    """Encode ``ins`` from its fields (``raw``/``length`` are ignored).

    ``validate=False`` skips the legality check for callers that build only
    legal instructions.
    """
    if validate:
        _check_legal(ins)
    return _encode_fields(ins.opcode, ins.rex, ins.prefixes, ins.operands)


def _encode_fields(op: Op, rex: int | None, prefixes: frozenset[int], ops: tuple[Operand, ...]) -> bytes:
    out = bytearray(p for p in LEGACY_PREFIXES if p in prefixes) if prefixes else bytearray()
    if rex is not None:
        out.append(rex)
    if op is Op.MOV_RI:
        out.append(0xB8 | ops[0].n & 7)
        out += ops[1].value.to_bytes(8, "little")
    elif op in (Op.PUSH, Op.POP):
        out.append((0x50 if op is Op.PUSH else 0x58) | ops[0].n & 7)
    elif op in JCC_SET:
        out += bytes([0x70 + (op - Op.JO), ops[0].value & 0xFF])
    elif op is Op.JMP8:
        out += bytes([0xEB, ops[0].value & 0xFF])
    elif op is Op.JMP32:
        out.append(0xE9)
        out += (ops[0].value & 0xFFFFFFFF).to_bytes(4, "little")
    elif op in MODRM_OPS:
        out += bytes(OPCODE_BYTES[op])
        if op in GROUP_REG:
            out += _encode_modrm(GROUP_REG[op], ops[0])
            if op in (Op.SHL, Op.SHR, Op.SAR):
                out.append(ops[1].value)
        elif op in RM_DEST_OPS or op is Op.LEA:
            out += _encode_modrm(ops[0].n, ops[1])
        else:
            out += _encode_modrm(ops[1].n, ops[0])
    else:
        out += bytes(OPCODE_BYTES[op])
    if len(out) > MAX_INSN_LEN:
        raise IllegalInstruction("encoding longer than 15 bytes")
    return bytes(out)


def make_instr(
    opcode: Op,
    operands: tuple[Operand, ...] = (),
    prefixes: frozenset[int] | set[int] = frozenset(),
    rex: int | None = None,
    width: int = 64,
    validate: bool = True,
) -> Instr:
    """Build a canonical, fully-populated Instr (minimal REX unless given)."""
    pfx = frozenset(prefixes)
    if width == 16:
        pfx = pfx | {P66}
    operands = tuple(operands)
    if rex is None:
        # Width as the Instr would report it before any REX is chosen.
        if opcode in STRING_OPS:
            probe_width = 8
        elif opcode in WIDTH16_OPS and P66 in pfx:
            probe_width = 16
        else:
            probe_width = 64
        req = _rex_bits(opcode, probe_width, operands)
        if width == 64 and (opcode is Op.MOV_RI or opcode in MODRM_OPS):
            req |= 8
        elif width == 16:
            req &= ~8
        rex = 0x40 | req if req else None
    if validate:
        _check_legal(Instr(opcode, rex, pfx, operands))
    raw = _encode_fields(opcode, rex, pfx, operands)
    return Instr(opcode, rex, pfx, operands, len(raw), raw)
