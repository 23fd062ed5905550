import ctypes
import subprocess
import sys
import textwrap
import threading
import time

import pytest

from pageguard import DmaConfig, LoopbackTransport, SimulatedDMA, default_guard
from pageguard.registry import PAGE_SIZE

PS = PAGE_SIZE


@pytest.fixture
def guard():
    return default_guard()


@pytest.fixture
def make_transport():
    made = []

    def make(world=2, chunk=4096, delay=1e-3, kind="sim", **kw):
        cls = SimulatedDMA if kind == "sim" else LoopbackTransport
        t = cls(world, DmaConfig(chunk_size=chunk, step_delay=delay, **kw))
        made.append(t)
        return t

    yield make
    for t in made:
        t.close()


@pytest.fixture(params=["sim", "loopback"])
def backend(request):
    return request.param


class TimedWrite(threading.Thread):
    """Write one byte at ``addr`` from a background thread, GIL released.

    ctypes.memmove drops the GIL, so the thread can sit blocked in the fault
    handler while the test thread keeps running Python.
    """

    def __init__(self, addr, value=0xAB):
        super().__init__(daemon=True)
        self.addr = addr
        self.src = ctypes.c_uint8(value)
        self.started_at = None
        self.elapsed = None

    def run(self):
        self.started_at = time.perf_counter()
        ctypes.memmove(self.addr, ctypes.addressof(self.src), 1)
        self.elapsed = time.perf_counter() - self.started_at


def timed_write(addr, value=0xAB):
    w = TimedWrite(addr, value)
    w.start()
    return w


def run_child(code, timeout=60):
    return subprocess.run([sys.executable, "-c", textwrap.dedent(code)],
                          capture_output=True, text=True, timeout=timeout)


# One PASS/FAIL line per acceptance criterion, printed at the end of the run.
# Tests are named test_criterion_NN_*; they may add a detail string.
CRITERIA = {}
CRITERION_DETAIL = {}


def _criterion_of(nodeid):
    name = nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_"):
        return int(name.split("_")[2])
    return None


def pytest_runtest_logreport(report):
    n = _criterion_of(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.outcome == "failed":
        ok = report.outcome == "passed"
        CRITERIA[n] = CRITERIA.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status = "PASS" if CRITERIA[n] else "FAIL"
        detail = CRITERION_DETAIL.get(n, "")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
