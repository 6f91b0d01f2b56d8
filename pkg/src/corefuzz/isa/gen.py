"""Random valid instruction sequences (the structure-aware generator).

Programs only contain legal subset instructions.  Branch targets are chosen
among instruction boundaries of the program itself (or its end), and memory
operands lean towards a small data window so that generated code exercises
real loads and stores instead of faulting on the first access.
"""

from __future__ import annotations

import random
from functools import partial

from .decoder import JCC_OPS, P66, RSP, Imm, Instr, Mem, Op, Operand, Reg
from .decoder import make_instr as _make_checked
from .model import (
    BOUNDARY_IMM64, F_NONE, F_R, F_R_IMM64, F_R_M, F_R_RM, F_REL8, F_REL32, F_RM, F_RM_IMM8, F_RM_R,
    ISA_MODEL, IsaEntry,
)
from .interp import PROXY_DATA_BASE as DATA_BASE, PROXY_DATA_PAGES as DATA_PAGES

# Operands are drawn from the model's legal forms, so encoding skips the legality check.
make_instr = partial(_make_checked, validate=False)

_ENTRIES = tuple(e for e in ISA_MODEL if e.opcode is not Op.INT3)
# Terminating instructions are legal but would cut most programs short.
_WEIGHTS = tuple(0.25 if e.opcode in (Op.HLT, Op.UD2) else 1.0 for e in _ENTRIES)


def _imm64(rng: random.Random) -> int:
    k = rng.random()
    if k < 0.3:
        return rng.choice(BOUNDARY_IMM64)
    if k < 0.6:
        return rng.randrange(0, 256)
    if k < 0.8:
        return DATA_BASE + rng.randrange(0, DATA_PAGES * 4096 - 64)
    return rng.getrandbits(64)


def _mem(rng: random.Random) -> Mem:
    k = rng.random()
    if k < 0.45:
        # Absolute address inside the data window.
        return Mem(None, DATA_BASE + rng.randrange(0, DATA_PAGES * 4096 - 8), disp_size=4, sib=True)
    if k < 0.55:
        return Mem(None, rng.randrange(-64, 4096), disp_size=4, rip=True)
    base = rng.randrange(16)
    sib = (base & 7) == RSP
    r = rng.random()
    if r < 0.3 and (base & 7) != 5:
        m = Mem(base, 0, sib=sib)
    elif r < 0.7:
        m = Mem(base, rng.randrange(-128, 128), disp_size=1, sib=sib)
    else:
        m = Mem(base, rng.randrange(-(1 << 31), 1 << 31), disp_size=4, sib=sib)
    if rng.random() < 0.2:
        idx = rng.choice([i for i in range(16) if i != RSP])
        m = Mem(m.base, m.disp, idx, rng.choice((1, 2, 4, 8)), disp_size=m.disp_size, sib=True)
    return m


def _rm(rng: random.Random) -> Operand:
    return Reg(rng.randrange(16)) if rng.random() < 0.6 else _mem(rng)


def _random_instr(rng: random.Random, e: IsaEntry) -> Instr:
    op = e.opcode
    pfx = rng.choice(e.prefix_sets)
    if e.form == F_NONE:
        if op is Op.UD2:
            return make_instr(op, (), pfx)
        return make_instr(op, (), pfx, width=8 if op in (Op.MOVSB, Op.STOSB) else 64)
    if e.form == F_R_IMM64:
        return make_instr(op, (Reg(rng.randrange(16)), Imm(_imm64(rng))))
    if e.form == F_R:
        return make_instr(op, (Reg(rng.randrange(16)),))
    if e.form in (F_REL8, F_REL32):
        return make_instr(op, (Imm(0),))
    width = 16 if P66 in pfx else 64
    if e.form == F_RM_R:
        ops: tuple[Operand, ...] = (_rm(rng), Reg(rng.randrange(16)))
    elif e.form == F_R_RM:
        ops = (Reg(rng.randrange(16)), _rm(rng))
    elif e.form == F_R_M:
        ops = (Reg(rng.randrange(16)), _mem(rng))
    elif e.form == F_RM:
        ops = (_rm(rng),)
    else:
        assert e.form == F_RM_IMM8
        ops = (_rm(rng), Imm(rng.randrange(64) if rng.random() < 0.9 else rng.randrange(256)))
    return make_instr(op, ops, pfx, width=width)


def _fix_branches(rng: random.Random, instrs: list[Instr]) -> list[Instr]:
    offsets = [0]
    for ins in instrs:
        offsets.append(offsets[-1] + ins.length)
    out = []
    for i, ins in enumerate(instrs):
        if ins.opcode not in JCC_OPS and ins.opcode not in (Op.JMP8, Op.JMP32):
            out.append(ins)
            continue
        nxt = offsets[i + 1]
        lo, hi = (-128, 127) if ins.opcode is not Op.JMP32 else (-(1 << 31), (1 << 31) - 1)
        targets = [t for t in offsets if lo <= t - nxt <= hi]
        forward = [t for t in targets if t >= nxt]
        pool = forward if forward and rng.random() < 0.8 else targets
        rel = rng.choice(pool) - nxt
        out.append(make_instr(ins.opcode, (Imm(rel),)))
    return out


def gen_random_instrs(rng_seed: int, max_instrs: int) -> list[Instr]:
    if max_instrs < 1:
        raise ValueError("max_instrs must be >= 1")
    rng = random.Random(rng_seed)
    n = rng.randint(1, max_instrs)
    instrs = [_random_instr(rng, e) for e in rng.choices(_ENTRIES, _WEIGHTS, k=n)]
    return _fix_branches(rng, instrs)


def gen_random_program(rng_seed: int, max_instrs: int) -> bytes:
    """A random legal instruction sequence of 1..max_instrs instructions."""
    return b"".join(i.raw for i in gen_random_instrs(rng_seed, max_instrs))
