"""Native x86_64 backend: runs snapshots on the host CPU in a harness process.

The harness is a small C program compiled on first use and cached.  The
driver (this module) talks to it over stdin/stdout with the framed command
protocol and pins it to one logical core.
"""

from __future__ import annotations

import hashlib
import os
import platform
import re
import shutil
import subprocess
import time
from importlib import resources
from pathlib import Path
from typing import Callable

from .backends import BackendDescriptor, BackendKind, ConfigError, Limits, RawEndState
from .isa.interp import ExecutionTimeout
from .player import (
    ChecksumCmd, Command, ExecCmd, HarnessAnomaly, PlanTimeout, PlayerSettings, decode_response,
    encode_command, plan_commands, read_frame, run_plan,
)
from .snapshot import DEFAULT_FLAGS_MASK, Snapshot


class NativeUnavailable(Exception):
    """The host cannot run the native backend."""


def host_supported() -> bool:
    return platform.system() == "Linux" and platform.machine() in ("x86_64", "AMD64")


def host_platform_id() -> str:
    """A microarchitecture-ish id from /proc/cpuinfo, e.g. ``native-GenuineIntel-6-85``."""
    fields: dict[str, str] = {}
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if ":" in line:
                k, v = (s.strip() for s in line.split(":", 1))
                fields.setdefault(k, v)
            elif fields:
                break
    except OSError:
        pass
    parts = [fields.get("vendor_id", "unknown"), fields.get("cpu family", "0"), fields.get("model", "0")]
    return "native-" + "-".join(re.sub(r"[^A-Za-z0-9]", "", p) for p in parts)


def _cache_dir() -> Path:
    base = os.environ.get("COREFUZZ_CACHE") or os.path.join(
        os.environ.get("XDG_CACHE_HOME") or os.path.expanduser("~/.cache"), "corefuzz"
    )
    return Path(base)


def harness_binary() -> Path:
    """Path to the compiled harness, building it if needed."""
    if not host_supported():
        raise NativeUnavailable(f"native backend needs Linux x86_64, host is {platform.machine()}")
    src = resources.files("corefuzz").joinpath("harness.c").read_bytes()
    digest = hashlib.sha256(src).hexdigest()[:16]
    out = _cache_dir() / f"harness-{digest}"
    if out.exists():
        return out
    cc = shutil.which(os.environ.get("CC", "cc")) or shutil.which("gcc") or shutil.which("clang")
    if cc is None:
        raise NativeUnavailable("no C compiler found to build the harness")
    out.parent.mkdir(parents=True, exist_ok=True)
    c_file = out.with_suffix(".c")
    c_file.write_bytes(src)
    tmp = out.with_name(out.name + f".tmp{os.getpid()}")
    proc = subprocess.run(
        [cc, "-O2", "-fno-stack-protector", "-o", str(tmp), str(c_file)],
        capture_output=True, text=True,
    )
    if proc.returncode != 0:
        raise NativeUnavailable(f"harness build failed:\n{proc.stderr}")
    os.replace(tmp, out)
    return out


def reserved_ranges(pid: int) -> tuple[tuple[int, int], ...]:
    """Address ranges mapped in process ``pid`` (its own code, heap, stack, libs)."""
    ranges = []
    for line in Path(f"/proc/{pid}/maps").read_text().splitlines():
        lo, hi = line.split()[0].split("-")
        ranges.append((int(lo, 16), int(hi, 16)))
    return tuple(ranges)


class NativeHarness:
    """One harness process speaking the framed protocol."""

    def __init__(self, binary: Path, core_id: int):
        self.proc = subprocess.Popen(
            [str(binary)], stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0,
        )
        self.last_exec_ms = 0.0
        try:
            os.sched_setaffinity(self.proc.pid, {core_id})
        except OSError as e:
            self.kill()
            raise ConfigError(f"cannot pin harness to core {core_id}: {e}") from None

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None

    def send(self, cmd: Command):
        assert self.proc.stdin is not None and self.proc.stdout is not None
        t0 = time.perf_counter()
        try:
            self.proc.stdin.write(encode_command(cmd))
        except (OSError, ValueError) as e:
            # ValueError: pipes already closed after the process was killed
            raise EOFError(f"harness gone: {e}") from None
        try:
            msg_type, payload = read_frame(self.proc.stdout.read)
        except ValueError as e:
            raise EOFError(f"harness gone: {e}") from None
        if isinstance(cmd, ExecCmd):
            self.last_exec_ms = (time.perf_counter() - t0) * 1000
        return decode_response(msg_type, payload)

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()
        for f in (self.proc.stdin, self.proc.stdout):
            if f is not None:
                f.close()

    def close(self) -> None:
        self.kill()


class NativeBackend:
    """Runs snapshots on the host CPU, pinned to ``core_id``.

    ``crash_hook`` (for tests) is called with the harness and each command
    before it is sent; it may kill the harness to inject a crash.
    """

    def __init__(
        self, core_id: int = 0, flags_mask: int = DEFAULT_FLAGS_MASK,
        crash_hook: Callable[[NativeHarness, Command], None] | None = None,
    ):
        self.binary = harness_binary()
        self.core_id = core_id
        self.flags_mask = flags_mask
        self.crash_hook = crash_hook
        self.spawned = 0
        self._harness: NativeHarness | None = None
        h = self._get()
        self.descriptor = BackendDescriptor(
            BackendKind.NATIVE, host_platform_id(), core_id, reserved_ranges(h.proc.pid),
        )

    def _get(self) -> NativeHarness:
        if self._harness is None or not self._harness.alive:
            if self._harness is not None:
                self._harness.kill()
            self._harness = NativeHarness(self.binary, self.core_id)
            self.spawned += 1
        return self._harness

    def open_harness(self):
        h = self._get()
        if self.crash_hook is None:
            return h
        return _HookedHarness(h, self.crash_hook)

    def recycle(self) -> None:
        if self._harness is not None:
            self._harness.kill()
            self._harness = None

    def collides(self, snapshot: Snapshot) -> bool:
        return any(
            m.start < hi and lo < m.end for m in snapshot.mappings for lo, hi in self.descriptor.reserved
        )

    def execute(self, snapshot: Snapshot, limits: Limits = Limits()) -> RawEndState:
        if self.collides(snapshot):
            raise ConfigError("snapshot mapping collides with a harness-reserved region")
        settings = PlayerSettings(cpu_time_limit_ms=max(1, int(limits.max_cpu_ms)))
        plan = plan_commands(snapshot, settings, read_back=True)
        plan = [c for c in plan if not isinstance(c, ChecksumCmd)]
        for attempt in range(2):
            try:
                res = run_plan(self.open_harness(), plan)
                break
            except PlanTimeout as t:
                raise ExecutionTimeout(int(t.cpu_ms)) from None
            except HarnessAnomaly:
                self.recycle()
                if attempt:
                    raise
        return RawEndState(res.registers, res.memory, res.signal, 0)

    def reset(self) -> None:
        self.recycle()

    def close(self) -> None:
        self.recycle()

    def __repr__(self) -> str:
        return f"NativeBackend(core={self.core_id})"


class _HookedHarness:
    def __init__(self, inner: NativeHarness, hook):
        self.inner = inner
        self.hook = hook

    @property
    def last_exec_ms(self) -> float:
        return self.inner.last_exec_ms

    def send(self, cmd: Command):
        self.hook(self.inner, cmd)
        return self.inner.send(cmd)

    def close(self) -> None:
        self.inner.close()
