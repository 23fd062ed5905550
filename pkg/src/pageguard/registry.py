"""Address-range bookkeeping for in-flight guarded sends.

The registry answers one question from inside the fault handler: which
in-flight op owns the page this faulting address lives on?  Storage is a
fixed-capacity native table (op slots behind a per-slot seqlock, plus an
open-addressed page-index -> refcount map) so the read path never allocates
or takes a blocking lock.  This module is the Python face of that table.
"""

import ctypes
import enum
import itertools
import mmap
import threading
from dataclasses import dataclass, field

import numpy as np

from . import _lib
from ._lib import lib
from .errors import DuplicateOpError, OpInFlightError, RegistryFull, UnknownOpError

PAGE_SIZE = mmap.PAGESIZE
ADDRESS_LIMIT = 1 << 64

DEFAULT_CAPACITY = 4096
DEFAULT_PAGE_SLOTS = 1 << 16


@dataclass(frozen=True)
class BufferDesc:
    """A byte extent ``[start, start + len)`` in this process."""

    start: int
    len: int

    def __post_init__(self):
        if self.start < 0 or self.len < 0:
            raise ValueError(f"negative buffer extent {self}")
        if self.start + self.len > ADDRESS_LIMIT:
            raise ValueError(f"buffer {self} overflows the address space")

    @property
    def end(self):
        return self.start + self.len

    @classmethod
    def of(cls, obj):
        """Describe a contiguous buffer (numpy array, bytes-like, or BufferDesc)."""
        if isinstance(obj, BufferDesc):
            return obj
        arr = as_byte_array(obj)
        return cls(arr.ctypes.data, arr.nbytes)


def as_byte_array(obj):
    if isinstance(obj, np.ndarray):
        if not obj.flags.c_contiguous:
            raise ValueError("buffer must be C-contiguous")
        return obj.reshape(-1).view(np.uint8)
    return np.frombuffer(obj, dtype=np.uint8)


@dataclass(frozen=True)
class PageRange:
    """A page-aligned extent; both ends are multiples of the page size."""

    start: int
    len: int

    @property
    def end(self):
        return self.start + self.len

    def validate(self, page_size):
        if self.start % page_size or self.len <= 0 or self.len % page_size:
            raise ValueError(f"{self} is not a non-empty page multiple of {page_size}")
        return self

    def pages(self, page_size):
        return range(self.start, self.end, page_size)

    def contains(self, addr):
        return self.start <= addr < self.end

    def covers(self, buffer):
        return self.start <= buffer.start and buffer.end <= self.end


class OpState(enum.Enum):
    IN_FLIGHT = "in_flight"
    COMPLETE = "complete"
    RELEASED = "released"


class ManualCompletion:
    """A completion flag driven by hand, for exercising the registry alone.

    Completion must not be set from a Python thread while another Python thread
    is blocked in the fault handler waiting for it: the blocked thread holds
    the GIL.  Transfers from the DMA engine do not have this problem.
    """

    generation = 1

    def __init__(self):
        self._word = ctypes.c_uint64(0)

    @property
    def flag_address(self):
        return ctypes.addressof(self._word)

    @property
    def completed(self):
        return self._word.value >= self.generation

    def complete(self):
        self._word.value = self.generation


_op_ids = itertools.count(1)


def next_op_id():
    return next(_op_ids)


@dataclass(eq=False)
class GuardedOp:
    """One in-flight send: its completion handle, guarded pages and real extent."""

    handle: object
    range: PageRange
    buffer: BufferDesc
    id: int = field(default_factory=next_op_id)
    released: bool = False

    @property
    def completed(self):
        return self.released or self.handle.completed

    @property
    def state(self):
        if self.released:
            return OpState.RELEASED
        return OpState.COMPLETE if self.handle.completed else OpState.IN_FLIGHT


class RegionRegistry:
    """Page-indexed registry of guarded ops with per-page reference counts.

    ``register``/``release`` are serialized internally; ``lookup`` and
    ``refcount`` are lock-free and may run concurrently with them.
    """

    def __init__(self, capacity=DEFAULT_CAPACITY, page_size=PAGE_SIZE, page_slots=DEFAULT_PAGE_SLOTS):
        if page_size < 4096 or page_size & (page_size - 1):
            raise ValueError(f"page size {page_size} is not a power of two >= 4096")
        self.capacity = capacity
        self.page_size = page_size
        self._ptr = lib.pg_reg_new(page_size, capacity, page_slots)
        if not self._ptr:
            raise MemoryError("could not allocate registry")
        self._ops = {}
        self._slots = {}
        self._lock = threading.Lock()

    def __del__(self):
        ptr, self._ptr = getattr(self, "_ptr", None), None
        if ptr:
            lib.pg_reg_free(ptr)

    def __len__(self):
        return len(self._ops)

    def __contains__(self, op_id):
        return op_id in self._ops

    def get(self, op_id):
        return self._ops.get(op_id)

    def ops(self):
        return list(self._ops.values())

    def _check(self, op):
        if op.released or op.handle.completed:
            raise ValueError(f"op {op.id} is not in flight")
        op.range.validate(self.page_size)
        if not op.range.covers(op.buffer):
            raise ValueError(f"{op.range} does not cover {op.buffer}")

    def _args(self, op):
        return (op.id, op.range.start, op.range.len, op.buffer.start, op.buffer.len,
                op.handle.flag_address, op.handle.generation)

    def register(self, op):
        """Make ``op`` visible to lookups on every address of its range."""
        return self._register_with(lib.pg_reg_register, op)

    def _register_with(self, fn, op):
        self._check(op)
        with self._lock:
            if op.id in self._ops:
                raise DuplicateOpError(f"op {op.id} already registered")
            # visible to Python-side lookups before the native publish
            self._ops[op.id] = op
            slot = fn(self._ptr, *self._args(op))
            if slot < 0:
                del self._ops[op.id]
                if slot == -_lib.ENOSPC:
                    raise RegistryFull(f"registry full ({len(self._ops)} ops)")
                _lib.raise_errno(slot, "register")
            self._slots[op.id] = slot
        return op.id

    def lookup(self, addr):
        """Earliest-registered in-flight op whose range contains ``addr``."""
        op_id = ctypes.c_uint64()
        slot = ctypes.c_int32()
        if not lib.pg_reg_lookup(self._ptr, addr, ctypes.byref(op_id), ctypes.byref(slot)):
            return None
        return self._ops.get(op_id.value)

    def release(self, op_id):
        """Drop a completed op; return the page addresses whose refcount hit zero."""
        return self._release_with(lib.pg_reg_release, op_id)

    def _release_with(self, fn, op_id):
        with self._lock:
            op = self._ops.get(op_id)
            if op is None:
                raise UnknownOpError(op_id)
            npages = op.range.len // self.page_size
            out = (ctypes.c_uint64 * npages)()
            n = fn(self._ptr, self._slots[op_id], op_id, out, npages)
            if n == -_lib.EBUSY:
                raise OpInFlightError(f"op {op_id} is still in flight")
            if n < 0:
                _lib.raise_errno(n, "release")
            del self._ops[op_id]
            del self._slots[op_id]
            op.released = True
        return frozenset(out[:n])

    def refcount(self, addr):
        return lib.pg_reg_refcount(self._ptr, addr)

    def pages(self):
        """Addresses of all pages with a nonzero refcount."""
        n = lib.pg_reg_pages(self._ptr, None, 0)
        out = (ctypes.c_uint64 * max(n, 1))()
        n = lib.pg_reg_pages(self._ptr, out, n)
        return sorted(out[:n])

    def needs_release(self, op_id):
        slot = self._slots.get(op_id)
        return slot is not None and bool(lib.pg_reg_needs_release(self._ptr, slot, op_id))
