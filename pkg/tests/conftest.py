import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def _native_ok() -> tuple[bool, str]:
    from corefuzz.native import NativeUnavailable, harness_binary, host_supported

    if not host_supported():
        return False, "host is not x86_64 Linux"
    try:
        harness_binary()
    except NativeUnavailable as e:
        return False, str(e)
    return True, ""


NATIVE_OK, NATIVE_WHY = _native_ok()

native_only = pytest.mark.skipif(not NATIVE_OK, reason=f"native backend unavailable: {NATIVE_WHY}")


@pytest.fixture(scope="session")
def native_backend():
    if not NATIVE_OK:
        pytest.skip(NATIVE_WHY)
    from corefuzz.native import NativeBackend

    b = NativeBackend(0)
    yield b
    b.close()


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, line: str) -> None:
    _ACCEPTANCE[n] = line


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
