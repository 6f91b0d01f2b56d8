import shutil
import subprocess

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corefuzz.isa import (
    DecodeError, DecodeErrorKind, IllegalInstruction, Imm, Mem, Op, Reg, decode_one,
    decode_program, encode, enumerate_instrs, make_instr,
)
from corefuzz.isa.decoder import MAX_INSN_LEN
from corefuzz.isa.gen import gen_random_instrs, gen_random_program
from corefuzz.isa.model import dump_model


class Probe:
    """A byte sequence that records the highest index read."""

    def __init__(self, data):
        self.data = bytes(data)
        self.max_index = -1

    def __len__(self):
        return len(self.data)

    def __getitem__(self, i):
        if isinstance(i, slice):
            raise TypeError("decoder must read byte by byte")
        self.max_index = max(self.max_index, i)
        return self.data[i]


@pytest.fixture(scope="module")
def model():
    return list(enumerate_instrs())


def test_model_round_trips_exhaustively(model):
    assert len(model) > 30_000
    for ins in model:
        back = decode_one(ins.raw)
        assert back == ins, ins
        assert encode(back) == ins.raw


def test_every_opcode_is_enumerated(model):
    assert {i.opcode for i in model} == set(Op)


@pytest.mark.parametrize("data, raw", [
    (b"\x90", b"\x90"),
    (b"\x48\x01\xd8", b"\x48\x01\xd8"),          # add rax, rbx
    (b"\x48\xf7\xe3\xcc", b"\x48\xf7\xe3"),      # mul rbx
    (b"\x0f\x0b", b"\x0f\x0b"),
    (b"\xf3\xa4", b"\xf3\xa4"),                  # rep movsb
    (b"\x48\xb8" + bytes(8), b"\x48\xb8" + bytes(8)),
])
def test_known_encodings(data, raw):
    assert decode_one(data).raw == raw


def test_known_operands():
    ins = decode_one(b"\x48\x8d\x44\x8b\x10")  # lea rax, [rbx+rcx*4+0x10]
    assert ins.opcode is Op.LEA
    assert ins.operands == (Reg(0), Mem(3, 0x10, 1, 4, 1, True))
    assert str(ins) == "lea rax, [rbx+rcx*4+0x10]"
    ins = decode_one(b"\x66\x01\xd8")
    assert (ins.opcode, ins.width) == (Op.ADD_MR, 16)
    assert str(ins) == "add ax, bx"


def test_fifteen_prefixes_are_too_long():
    p = Probe(b"\x66" * 15 + b"\x90")
    with pytest.raises(DecodeError) as e:
        decode_one(p)
    assert e.value.kind is DecodeErrorKind.TOO_LONG
    assert p.max_index == 14


@pytest.mark.parametrize("data, kind", [
    (b"", DecodeErrorKind.EMPTY_INPUT),
    (b"\x48", DecodeErrorKind.TRUNCATED),
    (b"\x48\xb8\x00", DecodeErrorKind.TRUNCATED),
    (b"\x0f", DecodeErrorKind.TRUNCATED),
    (b"\x06", DecodeErrorKind.UNSUPPORTED),
    (b"\xf0\x90", DecodeErrorKind.UNSUPPORTED),     # lock
    (b"\x48\x48\x90", DecodeErrorKind.UNSUPPORTED),  # two REX
    (b"\x0f\x05", DecodeErrorKind.UNSUPPORTED),     # syscall
    (b"\x48\x8d\xc0", DecodeErrorKind.UNSUPPORTED),  # lea with register source
])
def test_decode_errors(data, kind):
    with pytest.raises(DecodeError) as e:
        decode_one(data)
    assert e.value.kind is kind


@settings(max_examples=2000, deadline=None)
@given(st.binary(min_size=1, max_size=40))
def test_decoder_never_reads_past_byte_14(data):
    p = Probe(data)
    try:
        ins = decode_one(p)
    except DecodeError as e:
        assert e.examined <= MAX_INSN_LEN
    else:
        assert ins.length <= MAX_INSN_LEN
        assert ins.raw == data[:ins.length]
    assert p.max_index <= 14


@settings(max_examples=2000, deadline=None)
@given(st.binary(min_size=1, max_size=15))
def test_decoded_bytes_reencode(data):
    try:
        ins = decode_one(data)
    except DecodeError:
        return
    assert encode(ins) == ins.raw


def test_decode_program_stops_at_int3_and_reports_offset():
    prog = decode_program(b"\x90\x90\xcc\x06")
    assert [i.opcode for i in prog] == [Op.NOP, Op.NOP, Op.INT3]
    with pytest.raises(DecodeError) as e:
        decode_program(b"\x90\x90\x06")
    assert e.value.offset == 2


def test_make_instr_rejects_illegal_forms():
    with pytest.raises(IllegalInstruction):
        make_instr(Op.MUL, (Reg(3),), width=16)
    with pytest.raises(IllegalInstruction):
        make_instr(Op.LEA, (Reg(0), Reg(1)))
    with pytest.raises(IllegalInstruction):
        make_instr(Op.SHL, (Reg(0), Imm(256)))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40))
def test_generator_emits_legal_programs(seed, n):
    instrs = gen_random_instrs(seed, n)
    assert 1 <= len(instrs) <= n
    for ins in instrs:
        assert encode(ins) == ins.raw
    data = gen_random_program(seed, n)
    assert data == b"".join(i.raw for i in instrs)
    assert decode_program(data) == instrs


def test_generator_is_deterministic():
    assert gen_random_program(7, 30) == gen_random_program(7, 30)
    assert gen_random_program(7, 30) != gen_random_program(8, 30)


def test_model_dump_lists_every_entry():
    text = dump_model()
    for op in Op:
        assert op.name in text


_PREFIX_WORDS = {"data16", "rep", "repz", "repnz", "rex", "rex.W", "rex.WB", "rex.WRXB"}
_MNEMONIC = {Op.MOV_RI: "movabs", Op.JMP8: "jmp", Op.JMP32: "jmp", Op.STOSB: "stos", Op.INT3: "int3"}


def _expected_mnemonic(op):
    return _MNEMONIC.get(op, op.name.split("_")[0].lower())


@pytest.mark.skipif(shutil.which("objdump") is None, reason="objdump not installed")
def test_lengths_and_mnemonics_agree_with_objdump(model, tmp_path):
    blob = b"".join(i.raw for i in model)
    f = tmp_path / "model.bin"
    f.write_bytes(blob)
    out = subprocess.run(
        ["objdump", "-D", "-b", "binary", "-mi386:x86-64", "--insn-width=16", str(f)],
        capture_output=True, text=True, check=True,
    ).stdout
    rows = []
    for line in out.splitlines():
        parts = line.split("\t")
        if len(parts) >= 3 and parts[0].strip().endswith(":"):
            rows.append((int(parts[0].strip()[:-1], 16), len(parts[1].split()), parts[2].split()))
    assert len(rows) == len(model)
    off = 0
    for ins, (addr, n, words) in zip(model, rows):
        assert (addr, n) == (off, ins.length), ins
        words = [w for w in words if w not in _PREFIX_WORDS]
        mnem = words[0].split(",")[0] if words else ""
        # objdump appends an operand-size suffix for some memory forms.
        assert mnem in {_expected_mnemonic(ins.opcode), _expected_mnemonic(ins.opcode) + "q",
                        _expected_mnemonic(ins.opcode) + "w"}, (ins, words)
        off += ins.length
