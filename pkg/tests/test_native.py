from dataclasses import replace

from builders import case_snapshot, code_snapshot, flags_grid, nop_snapshot
from conftest import native_only
from corefuzz.backends import InterpBackend
from corefuzz.isa import Mem, Op, Reg, make_instr
from corefuzz.maker import make_snapshot, record_end_states
from corefuzz.player import ExecCmd, Player, Verdict, play
from corefuzz.snapshot import Signal

pytestmark = native_only


def test_nop_matches(native_backend):
    o = play(native_backend, nop_snapshot())
    assert o.verdict is Verdict.MATCH


def test_flags_grid_matches_native(native_backend):
    cases = flags_grid()
    bad = [c for c in cases if play(native_backend, case_snapshot(c)).verdict is not Verdict.MATCH]
    assert not bad, bad[:5]
    assert len(cases) == 5952


def test_unmapped_access_faults_at_the_address(native_backend):
    load = make_instr(Op.MOV_RM, (Reg(0), Mem(3))).raw
    s, _ = record_end_states(code_snapshot(load, rbx=0x7654321008), [InterpBackend()])
    raw = native_backend.execute(s)
    assert (raw.signal.signal, raw.signal.fault_address) == (Signal.SEGV, 0x7654321008)
    assert play(native_backend, s).verdict is Verdict.MATCH


def test_sigill_and_trap_end_rips(native_backend):
    for code in (b"\x0f\x0b", b"\x90\x90"):
        s = make_snapshot(code, InterpBackend())
        a, b = native_backend.execute(s), InterpBackend().execute(s)
        # native rflags also carries system bits (IF, RF) outside any mask
        assert (a.registers.gpr, a.registers.rip, a.signal) == (b.registers.gpr, b.registers.rip, b.signal)


def test_driver_survives_crash_injection():
    from corefuzz.native import NativeBackend

    state = {"armed": True}

    # kill the harness on the first attempt of every play
    def crash(h, cmd):
        if isinstance(cmd, ExecCmd) and state["armed"]:
            state["armed"] = False
            h.kill()

    b = NativeBackend(0, crash_hook=crash)
    p = Player(b)
    try:
        s = nop_snapshot()
        for _ in range(1000):
            state["armed"] = True
            assert p.play(s).verdict is Verdict.MATCH
        assert p.stats.anomalies == 1000
        assert b.spawned >= 1000
    finally:
        b.close()
