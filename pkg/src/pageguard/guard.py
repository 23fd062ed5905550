"""Page protection and the write-fault handler.

The handler is native code (see ``_native.c``).  On a write fault it looks the
address up in the bound registry; if an in-flight op owns the page it spins
(then yields) on the op's completion flag, restores write access to the pages
no other in-flight op still covers, and returns so the write retries.  Faults
on addresses the registry does not know are handed back to the previous
disposition, so genuine bugs still crash.
"""

import ctypes
import enum
import mmap
import os
import threading
from dataclasses import dataclass

import numpy as np

from . import _lib
from ._lib import lib
from .errors import GuardInitError, ProtectionError, RegistryFull
from .registry import PAGE_SIZE, PageRange, RegionRegistry

DEFAULT_SPIN = 64


@dataclass(frozen=True)
class PageGeometry:
    page_size: int = PAGE_SIZE

    def __post_init__(self):
        ps = self.page_size
        if ps < 4096 or ps & (ps - 1):
            raise ValueError(f"page size {ps} is not a power of two >= 4096")

    @classmethod
    def from_platform(cls):
        return cls(os.sysconf("SC_PAGE_SIZE"))


def align_to_pages(buffer, geom=None):
    """Smallest page-aligned, page-multiple range containing ``buffer``."""
    ps = (geom or PageGeometry()).page_size
    if buffer.len <= 0:
        raise ValueError("cannot align an empty buffer")
    page_start = buffer.start & ~(ps - 1)
    prot_len = buffer.len + (buffer.start - page_start)
    prot_len = -(-prot_len // ps) * ps
    return PageRange(page_start, prot_len)


def _protection_call(fn, rng, what):
    rc = fn(rng.start, rng.len)
    if rc < 0:
        raise ProtectionError(-rc, f"{what} {rng}: {os.strerror(-rc)}")


def protect_read_only(rng):
    """Make every page of ``rng`` read-only; writes fault, reads do not."""
    _protection_call(lib.pg_protect, rng, "mprotect(PROT_READ)")


def unprotect(rng):
    """Restore read/write access to ``rng``. Idempotent."""
    _protection_call(lib.pg_unprotect, rng, "mprotect(PROT_READ|PROT_WRITE)")


def alloc_pages(nbytes, page_size=PAGE_SIZE):
    """Zeroed, page-aligned uint8 array backed by an anonymous mapping.

    Only memory the caller owns whole pages of should be guarded; this is the
    easy way to get it.
    """
    rounded = max(page_size, -(-nbytes // page_size) * page_size)
    slack = page_size if page_size > PAGE_SIZE else 0
    mm = mmap.mmap(-1, rounded + slack)
    base = ctypes.addressof(ctypes.c_char.from_buffer(mm))
    offset = (-base) % page_size
    arr = np.frombuffer(mm, dtype=np.uint8, count=rounded, offset=offset)
    return arr[:nbytes]


class FaultKind(enum.Enum):
    GUARDED_WRITE = _lib.KIND_GUARDED
    UNRELATED = _lib.KIND_UNRELATED


@dataclass(frozen=True)
class FaultEvent:
    addr: int
    kind: FaultKind
    wait_time: float
    op_id: int = 0
    false_positive: bool = False


def fault_events(since=0):
    """Events recorded by the handler since ring index ``since``; returns (events, next index)."""
    buf = (_lib.Event * 4096)()
    head = lib.pg_guard_events(buf, since, 4096)
    n = min(head - max(since, head - 4096), 4096)
    events = [
        FaultEvent(e.addr, FaultKind(e.kind), e.wait_ns / 1e9, e.op_id, bool(e.false_positive))
        for e in buf[:n]
    ]
    return events, head


class FaultLog:
    """Collect the handler's fault events over a ``with`` block."""

    def __enter__(self):
        self._start = lib.pg_guard_events(None, 0, 0)
        self.events = []
        return self

    def __exit__(self, *exc):
        self.events, _ = fault_events(self._start)
        return False

    @property
    def guarded(self):
        return [e for e in self.events if e.kind is FaultKind.GUARDED_WRITE]


@dataclass(frozen=True)
class GuardConfig:
    capacity: int = 4096
    spin: int = DEFAULT_SPIN
    watchdog_ms: int = 0  # 0 disables the stuck-send watchdog

    @classmethod
    def from_env(cls, environ=os.environ):
        return cls(
            capacity=int(environ.get("PAGEGUARD_GUARD_CAPACITY", cls.capacity)),
            spin=int(environ.get("PAGEGUARD_GUARD_SPIN", cls.spin)),
            watchdog_ms=int(environ.get("PAGEGUARD_GUARD_WATCHDOG_MS", cls.watchdog_ms)),
        )


_bind_lock = threading.Lock()
_bound = None


def install_fault_handler(registry, config=None):
    """Install the write-fault handler (once per process) and bind ``registry`` to it.

    Rebinding to another registry is allowed only while the current one holds
    no ops, since faults on its pages would no longer resolve.
    """
    global _bound
    config = config or GuardConfig()
    with _bind_lock:
        if _bound is not None and _bound is not registry and len(_bound):
            raise GuardInitError("another registry with live ops is bound to the handler")
        rc = lib.pg_guard_install()
        if rc < 0:
            raise GuardInitError(f"sigaction failed: {os.strerror(-rc)}")
        lib.pg_guard_config(config.spin, config.watchdog_ms * 1_000_000)
        lib.pg_guard_bind(registry._ptr)
        _bound = registry


def handler_installed():
    return bool(lib.pg_guard_is_installed())


def bound_registry():
    return _bound


class MemoryGuard:
    """A registry bound to the process fault handler, plus guard/release of ops."""

    def __init__(self, registry=None, config=None):
        self.config = config or GuardConfig()
        self.registry = registry or RegionRegistry(capacity=self.config.capacity)
        self.geometry = PageGeometry(self.registry.page_size)

    def install(self):
        install_fault_handler(self.registry, self.config)
        return self

    def align(self, buffer):
        return align_to_pages(buffer, self.geometry)

    def guard(self, op):
        """Register ``op`` and write-protect its pages, in that order, atomically
        with respect to the fault handler. On failure nothing stays protected."""
        if _bound is not self.registry:
            raise GuardInitError("registry is not bound to the fault handler; call install()")
        try:
            return self.registry._register_with(lib.pg_guard_register_protect, op)
        except RegistryFull:
            raise
        except OSError as exc:
            raise ProtectionError(exc.errno, f"cannot guard {op.range}: {exc.strerror}") from None

    def release(self, op_id):
        """Release a completed op and unprotect pages no other op still covers."""
        return self.registry._release_with(lib.pg_guard_release, op_id)

    def protected_pages(self):
        return self.registry.pages()


_default_guard = None


def default_guard(config=None):
    """The process-wide guard, created and installed on first use."""
    global _default_guard
    with _bind_lock:
        guard = _default_guard
    if guard is None:
        guard = MemoryGuard(config=config or GuardConfig.from_env())
        _default_guard = guard
    if _bound is not guard.registry:
        guard.install()
    return guard
