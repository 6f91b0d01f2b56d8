from .decoder import (
    DecodeError, DecodeErrorKind, IllegalInstruction, Imm, Instr, Mem, Op, Reg,
    decode_one, decode_program, encode, make_instr,
)
from .model import ISA_MODEL, dump_model, enumerate_instrs

__all__ = [
    "DecodeError", "DecodeErrorKind", "IllegalInstruction", "Imm", "Instr", "Mem", "Op",
    "Reg", "decode_one", "decode_program", "encode", "make_instr",
    "ISA_MODEL", "dump_model", "enumerate_instrs",
]
