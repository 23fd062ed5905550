"""The user-facing send API: ``send_and_protect`` and completion harvesting.

Small messages are copied into a staging slot and sent from there, so the
caller's buffer is free immediately.  Large ones are sent zero-copy straight
from the caller's buffer, whose pages are write-protected until the transfer
completes; a writer that touches them blocks in the fault handler instead of
corrupting the message.
"""

import enum
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import _lib
from .errors import ProtectionError, RegistryFull
from .guard import alloc_pages, default_guard
from .registry import BufferDesc, GuardedOp, as_byte_array

DEFAULT_THRESHOLD = 4096
DEFAULT_POOL_SLOTS = 64


class SendMode(enum.Enum):
    ALWAYS_COPY = "copy"
    ALWAYS_PROTECT = "protect"


@dataclass(frozen=True)
class SendPolicy:
    threshold: int = DEFAULT_THRESHOLD
    mode_override: SendMode | None = None

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")

    def should_protect(self, nbytes):
        if self.mode_override is SendMode.ALWAYS_COPY:
            return False
        if self.mode_override is SendMode.ALWAYS_PROTECT:
            return nbytes > 0
        return nbytes >= self.threshold


@dataclass(frozen=True)
class GuardStats:
    protects: int = 0
    unprotects: int = 0
    faults_guarded: int = 0
    faults_false_positive: int = 0
    copies: int = 0
    bytes_copied: int = 0
    total_block_time: float = 0.0  # seconds writers spent blocked
    fallbacks: int = 0  # protected sends that fell back to copying


class StagingPool:
    """Fixed-size staging slots carved from one page-aligned arena.

    Requests larger than a slot, or made while every slot is busy, get a
    one-off buffer instead.
    """

    def __init__(self, slot_size, slots=DEFAULT_POOL_SLOTS):
        self.slot_size = max(slot_size, 1)
        self._arena = alloc_pages(self.slot_size * slots) if slots else None
        self._free = list(range(slots))
        self._lock = threading.Lock()

    def acquire(self, nbytes):
        if nbytes <= self.slot_size:
            with self._lock:
                if self._free:
                    i = self._free.pop()
                    base = i * self.slot_size
                    return self._arena[base:base + nbytes], i
        return np.empty(nbytes, dtype=np.uint8), None

    def release(self, index):
        if index is not None:
            with self._lock:
                self._free.append(index)

    @property
    def available(self):
        return len(self._free)


@dataclass(eq=False)
class SendToken:
    handle: object
    kind: str  # "copy", "protect" or "unguarded"
    nbytes: int
    op: GuardedOp | None = None
    staging: np.ndarray | None = None
    staging_slot: int | None = None

    @property
    def completed(self):
        return self.handle.completed


class PendingSet:
    """Sends issued but not yet harvested by ``check_for_completed``."""

    def __init__(self):
        self._tokens = []
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._tokens)

    def __iter__(self):
        with self._lock:
            return iter(list(self._tokens))

    def __contains__(self, token):
        return token in self._tokens

    def add(self, token):
        with self._lock:
            self._tokens.append(token)

    def take_completed(self):
        done, keep = [], []
        with self._lock:
            for t in self._tokens:
                (done if t.handle.completed else keep).append(t)
            self._tokens = keep
        return done


class GuardedSender:
    """Send from one rank with copy-or-protect semantics.

    ``disabled=True`` skips protection entirely and sends large buffers
    zero-copy with no guard; this exists to show the corruption the guard
    prevents.
    """

    def __init__(self, comm, policy=None, guard=None, disabled=False,
                 pool_slots=DEFAULT_POOL_SLOTS, staging_size=None):
        self.comm = comm
        self.policy = policy or SendPolicy()
        self.disabled = disabled
        self.guard = None if disabled else (guard or default_guard())
        self.pending = PendingSet()
        self._pool = StagingPool(staging_size or self.policy.threshold, pool_slots)
        self._lock = threading.Lock()
        self._counts = dict(protects=0, copies=0, bytes_copied=0, fallbacks=0)
        self._baseline = _lib.guard_stats()
        self._closed = False
        comm.transport.attach(self)

    def send_and_protect(self, dst, tag, buffer):
        """Send ``buffer`` to ``dst`` without blocking; returns a SendToken.

        Below the policy threshold the payload is copied and the caller may
        reuse the buffer at once.  Otherwise the buffer is sent in place and
        its pages stay read-only until the send completes.
        """
        desc = BufferDesc.of(buffer)
        if self.disabled and self.policy.should_protect(desc.len):
            token = SendToken(self.comm.isend(dst, tag, buffer), "unguarded", desc.len)
        elif self.policy.should_protect(desc.len):
            token = self._send_protected(dst, tag, buffer, desc)
        else:
            token = self._send_copy(dst, tag, buffer, desc.len)
        self.pending.add(token)
        return token

    def _send_copy(self, dst, tag, buffer, nbytes):
        staging, slot = self._pool.acquire(nbytes)
        if nbytes:
            np.copyto(staging, as_byte_array(buffer))
        try:
            handle = self.comm.isend(dst, tag, staging)
        except BaseException:
            self._pool.release(slot)
            raise
        with self._lock:
            self._counts["copies"] += 1
            self._counts["bytes_copied"] += nbytes
        return SendToken(handle, "copy", nbytes, staging=staging, staging_slot=slot)

    def _send_protected(self, dst, tag, buffer, desc):
        rng = self.guard.align(desc)
        handle = self.comm.prepare_send(dst, tag, buffer)
        op = GuardedOp(handle, rng, desc)
        try:
            self.guard.guard(op)
        except (RegistryFull, ProtectionError):
            self.comm.cancel(handle)
            with self._lock:
                self._counts["fallbacks"] += 1
            return self._send_copy(dst, tag, buffer, desc.len)
        try:
            self.comm.start(handle)
        except BaseException:
            self.comm.cancel(handle)
            self.guard.release(op.id)
            raise
        with self._lock:
            self._counts["protects"] += 1
        return SendToken(handle, "protect", desc.len, op=op)

    def check_for_completed(self, pending=None):
        """Harvest finished sends: release guarded pages, recycle staging slots.

        Returns the number of sends harvested.  Pages shared with a still
        in-flight send stay protected.
        """
        pending = self.pending if pending is None else pending
        done = pending.take_completed()
        for token in done:
            if token.op is not None:
                self.guard.release(token.op.id)
            if token.staging is not None:
                self._pool.release(token.staging_slot)
                token.staging = None
        return len(done)

    def wait_all(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while len(self.pending):
            self.check_for_completed()
            if not len(self.pending):
                break
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError(f"{len(self.pending)} sends still pending")
            time.sleep(0)

    def guard_stats(self):
        now = _lib.guard_stats()
        base = self._baseline

        def delta(i):
            return now[i] - base[i]

        with self._lock:
            c = dict(self._counts)
        return GuardStats(
            protects=c["protects"],
            unprotects=delta(_lib.STAT_UNPROTECTS),
            faults_guarded=delta(_lib.STAT_FAULTS_GUARDED),
            faults_false_positive=delta(_lib.STAT_FAULTS_FP),
            copies=c["copies"],
            bytes_copied=c["bytes_copied"],
            total_block_time=delta(_lib.STAT_BLOCK_NS) / 1e9,
            fallbacks=c["fallbacks"],
        )

    def close(self):
        if self._closed:
            return
        self._closed = True
        self.wait_all()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
