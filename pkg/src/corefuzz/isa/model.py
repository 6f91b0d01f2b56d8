"""The table of legal (opcode, prefix set, operand form) combinations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from .decoder import (
    GROUP_OPCODES, JCC_OPS, LEGACY_PREFIXES, OPCODE_BYTES, P66, PF2, PF3, RBP, RSP,
    STRING_OPS, WIDTH16_OPS, Imm, Instr, Mem, Op, Operand, Reg, make_instr,
)

BOUNDARY_IMM64 = (0, 1, (1 << 31) - 1, (1 << 63) - 1, (1 << 64) - 1)
BOUNDARY_IMM8 = (0, 1, 0x3F, 0x7F, 0xFF)
BOUNDARY_REL8 = (0, 1, 0x7F, -1, -0x80)
BOUNDARY_REL32 = (0, 1, (1 << 31) - 1, -1, -(1 << 31))
BOUNDARY_DISP8 = (0, 0x7F, -0x80)
BOUNDARY_DISP32 = (0, 1, (1 << 31) - 1, -1, -(1 << 31))

# Operand shapes used in the table.
F_NONE = "none"
F_RM_R = "r/m64, r64"
F_R_RM = "r64, r/m64"
F_R_M = "r64, m"
F_RM = "r/m64"
F_RM_IMM8 = "r/m64, imm8"
F_R_IMM64 = "r64, imm64"
F_R = "r64 (opcode+reg)"
F_REL8 = "rel8"
F_REL32 = "rel32"


@dataclass(frozen=True)
class IsaEntry:
    opcode: Op
    opcode_bytes: tuple[int, ...]
    form: str
    prefix_sets: tuple[frozenset[int], ...]
    rex_rule: str
    widths: tuple[int, ...] = (64,)
    note: str = ""


def _entries() -> tuple[IsaEntry, ...]:
    none = (frozenset(),)
    out = [
        IsaEntry(Op.NOP, (0x90,), F_NONE, none, "none"),
        IsaEntry(Op.INT3, (0xCC,), F_NONE, none, "none", note="snapshot terminator, SIGTRAP"),
        IsaEntry(Op.HLT, (0xF4,), F_NONE, none, "none", note="privileged: SIGSEGV"),
        IsaEntry(
            Op.UD2, (0x0F, 0x0B), F_NONE,
            tuple(frozenset(s) for s in _subsets(LEGACY_PREFIXES)), "any",
            note="SIGILL",
        ),
        IsaEntry(Op.MOV_RI, (0xB8,), F_R_IMM64, none, "W required, B extends reg"),
        IsaEntry(Op.PUSH, (0x50,), F_R, none, "optional, B extends reg"),
        IsaEntry(Op.POP, (0x58,), F_R, none, "optional, B extends reg"),
        IsaEntry(Op.JMP8, (0xEB,), F_REL8, none, "none"),
        IsaEntry(Op.JMP32, (0xE9,), F_REL32, none, "none"),
    ]
    out += [IsaEntry(op, (0x70 + i,), F_REL8, none, "none") for i, op in enumerate(JCC_OPS)]
    for op in (Op.MOVSB, Op.STOSB):
        out.append(IsaEntry(
            op, OPCODE_BYTES[op], F_NONE,
            (frozenset(), frozenset({PF3}), frozenset({PF2})), "none", (8,),
            "F3/F2 repeat rcx times",
        ))
    for op, form in (
        (Op.MOV_MR, F_RM_R), (Op.MOV_RM, F_R_RM),
        (Op.ADD_MR, F_RM_R), (Op.ADD_RM, F_R_RM), (Op.SUB_MR, F_RM_R), (Op.SUB_RM, F_R_RM),
        (Op.XOR_MR, F_RM_R), (Op.XOR_RM, F_R_RM), (Op.AND_MR, F_RM_R), (Op.AND_RM, F_R_RM),
        (Op.OR_MR, F_RM_R), (Op.OR_RM, F_R_RM), (Op.CMP_MR, F_RM_R), (Op.CMP_RM, F_R_RM),
        (Op.TEST, F_RM_R),
        (Op.INC, F_RM), (Op.DEC, F_RM),
        (Op.SHL, F_RM_IMM8), (Op.SHR, F_RM_IMM8), (Op.SAR, F_RM_IMM8),
        (Op.MUL, F_RM), (Op.IMUL, F_RM), (Op.DIV, F_RM), (Op.LEA, F_R_M),
    ):
        sixteen = op in WIDTH16_OPS
        out.append(IsaEntry(
            op, OPCODE_BYTES[op], form,
            (frozenset(), frozenset({P66})) if sixteen else (frozenset(),),
            "W selects 64-bit; R/X/B extend operands",
            (64, 16) if sixteen else (64,),
            "/%d" % _group_reg(op) if op in GROUP_OPCODES.values() else "",
        ))
    return tuple(out)


def _group_reg(op: Op) -> int:
    return next(r for (_, r), o in GROUP_OPCODES.items() if o is op)


def _subsets(items: tuple[int, ...]) -> Iterator[tuple[int, ...]]:
    for mask in range(1 << len(items)):
        yield tuple(x for i, x in enumerate(items) if mask >> i & 1)


ISA_MODEL: tuple[IsaEntry, ...] = _entries()


def dump_model() -> str:
    lines = [f"{'opcode':<8} {'bytes':<8} {'form':<18} {'prefixes':<22} {'widths':<8} rex / notes"]
    for e in ISA_MODEL:
        pfx = ",".join(
            "{" + "".join(f"{p:02X}" for p in sorted(s)) + "}" for s in e.prefix_sets
        )
        lines.append(
            f"{e.opcode.name:<8} {' '.join(f'{b:02X}' for b in e.opcode_bytes):<8} "
            f"{e.form:<18} {pfx:<22} {','.join(map(str, e.widths)):<8} "
            f"{e.rex_rule}{'; ' + e.note if e.note else ''}"
        )
    return "\n".join(lines)


def mem_forms() -> Iterator[Mem]:
    """Representative memory operands covering every addressing encoding."""
    for base in range(16):
        if base & 7 not in (RSP, RBP):
            yield Mem(base)
        for d in BOUNDARY_DISP8:
            yield Mem(base, d, disp_size=1, sib=(base & 7) == RSP)
        for d in BOUNDARY_DISP32:
            yield Mem(base, d, disp_size=4, sib=(base & 7) == RSP)
    for index in range(16):
        if index == RSP:
            continue
        for scale in (1, 2, 4, 8):
            yield Mem(0, 0, index, scale, sib=True)
            yield Mem(13, 0x10, index, scale, disp_size=1, sib=True)
            yield Mem(None, 0x2000, index, scale, disp_size=4, sib=True)
    for base in (0, 4, 12):
        yield Mem(base, 0, None, 1, sib=True)
    for d in BOUNDARY_DISP32:
        yield Mem(None, d, disp_size=4, rip=True)
        yield Mem(None, d, disp_size=4, sib=True)


def _rm_operands() -> Iterator[Operand]:
    yield from (Reg(n) for n in range(16))
    yield from mem_forms()


def enumerate_instrs() -> Iterator[Instr]:
    """Every legal entry crossed with its operand forms and boundary immediates."""
    for e in ISA_MODEL:
        op = e.opcode
        if e.form == F_NONE:
            for pfx in e.prefix_sets:
                if op is Op.UD2:
                    yield make_instr(op, (), pfx)
                    for rex in (0x40, 0x48, 0x4F):
                        yield make_instr(op, (), pfx, rex=rex)
                else:
                    yield make_instr(op, (), pfx, width=8 if op in STRING_OPS else 64)
        elif e.form == F_R_IMM64:
            for n in range(16):
                for v in BOUNDARY_IMM64:
                    yield make_instr(op, (Reg(n), Imm(v)))
        elif e.form == F_R:
            for n in range(16):
                yield make_instr(op, (Reg(n),))
                yield make_instr(op, (Reg(n),), rex=0x48 | (n >> 3))
        elif e.form in (F_REL8, F_REL32):
            for v in BOUNDARY_REL8 if e.form == F_REL8 else BOUNDARY_REL32:
                yield make_instr(op, (Imm(v),))
        else:
            yield from _enumerate_modrm(e)


def _enumerate_modrm(e: IsaEntry) -> Iterator[Instr]:
    op = e.opcode
    for width in e.widths:
        variants = [(frozenset(), None)]
        if width == 64 and P66 in set().union(*e.prefix_sets):
            variants.append((frozenset({P66}), None))  # 66 + REX.W: W wins
        for pfx, rex in variants:
            for k, rm in enumerate(_rm_operands()):
                reg = Reg(k % 16)
                if e.form == F_RM_R:
                    ops: tuple[Operand, ...] = (rm, reg)
                elif e.form == F_R_RM:
                    ops = (reg, rm)
                elif e.form == F_R_M:
                    if not isinstance(rm, Mem):
                        continue
                    ops = (reg, rm)
                elif e.form == F_RM:
                    ops = (rm,)
                else:  # F_RM_IMM8
                    for v in BOUNDARY_IMM8:
                        yield make_instr(op, (rm, Imm(v)), pfx, rex, width)
                    continue
                yield make_instr(op, ops, pfx, rex, width)
