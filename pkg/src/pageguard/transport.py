"""Non-blocking message transports with MPI-style isend/test/probe/recv.

Both backends share one native progress engine.  A transfer reads its source
buffer at ``chunk_size`` bytes per ``step_delay`` (bytes are streamed across
each step, so records smaller than a chunk can still be caught mid-update),
checksums what it actually read, and only then publishes completion.  The
engine runs on its own thread, so completion never depends on the caller
polling, or on the GIL.

``SimulatedDMA`` delivers into in-process inboxes.  ``LoopbackTransport``
writes each finished message as a frame over a TCP socket on 127.0.0.1::

    <8-byte LE payload length><4-byte LE tag><4-byte LE source rank><payload>
"""

import collections
import ctypes
import errno
import itertools
import os
import socket
import struct
import threading
import time
import weakref
from dataclasses import dataclass

import numpy as np

from . import _lib
from ._lib import lib
from .errors import (
    IncompleteHandle,
    MessageTooLarge,
    StaleHandle,
    TransportClosed,
    TransportError,
    UnknownDestination,
)
from .registry import BufferDesc, as_byte_array

ANY_SOURCE = -1
ANY_TAG = -1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

FRAME_HEADER = struct.Struct("<QII")


def fnv1a64(data):
    """64-bit FNV-1a, written out byte by byte."""
    h = FNV_OFFSET
    for b in bytes(data):
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def checksum64(buffer):
    """FNV-1a of a contiguous buffer, computed natively."""
    arr = as_byte_array(buffer)
    return lib.pg_fnv1a64(arr.ctypes.data, arr.nbytes)


def encode_frame(src, tag, payload):
    payload = bytes(payload)
    return FRAME_HEADER.pack(len(payload), tag, src) + payload


def decode_frame(data):
    """Parse one frame from the front of ``data``; returns (src, tag, payload, consumed)
    or None if ``data`` does not yet hold a whole frame."""
    if len(data) < FRAME_HEADER.size:
        return None
    length, tag, src = FRAME_HEADER.unpack_from(data)
    end = FRAME_HEADER.size + length
    if len(data) < end:
        return None
    return src, tag, bytes(data[FRAME_HEADER.size:end]), end


@dataclass(frozen=True)
class DmaConfig:
    chunk_size: int = 4096
    step_delay: float = 100e-6  # seconds per chunk
    checksum: str = "fnv1a64"  # or "none" to skip corruption reports
    tick: float = 50e-6  # progress-thread wakeup granularity while transfers run

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.step_delay < 0:
            raise ValueError("step_delay must be >= 0")
        if self.checksum not in ("fnv1a64", "none"):
            raise ValueError(f"unsupported checksum {self.checksum!r}")

    @classmethod
    def from_env(cls, environ=os.environ):
        kw = {}
        if "PAGEGUARD_DMA_CHUNK" in environ:
            kw["chunk_size"] = int(environ["PAGEGUARD_DMA_CHUNK"])
        if "PAGEGUARD_DMA_DELAY_US" in environ:
            kw["step_delay"] = float(environ["PAGEGUARD_DMA_DELAY_US"]) * 1e-6
        return cls(**kw)

    def transfer_time(self, nbytes):
        return nbytes / self.chunk_size * self.step_delay


@dataclass(frozen=True)
class CorruptionReport:
    op_id: int
    snapshot_checksum: int
    observed_checksum: int
    started_ns: int
    last_read_ns: int
    completed_ns: int
    bytes_transferred: int

    @property
    def corrupted(self):
        return self.snapshot_checksum != self.observed_checksum


@dataclass
class Status:
    source: int = ANY_SOURCE
    tag: int = ANY_TAG
    count: int = 0


_handle_ids = itertools.count(1)


class CompletionHandle:
    """A pending transfer. ``completed`` flips to True exactly once."""

    def __init__(self, transport, slot, gen, keepalive=None):
        self.id = next(_handle_ids)
        self._transport = transport
        self._slot = slot
        self.generation = gen
        self.flag_address = lib.pg_flag_ptr(transport._ptr, slot)
        self._flag = ctypes.c_uint64.from_address(self.flag_address)
        self._keepalive = keepalive
        self._finalizer = weakref.finalize(self, transport._drop, slot, gen, keepalive)

    @property
    def completed(self):
        # a closed transport drained every transfer before freeing its flags
        if self._transport._closed:
            return True
        return self._flag.value >= self.generation

    @property
    def bytes_sent(self):
        return lib.pg_bytes_sent(self._transport._ptr, self._slot)

    def __repr__(self):
        state = "done" if self.completed else "in flight"
        return f"<CompletionHandle {self.id} {state}>"


class Transport:
    """A world of ``world_size`` ranks served by one native progress engine."""

    _loopback = 0

    def __init__(self, world_size, config=None, capacity=8192):
        self.world_size = world_size
        self.config = config or DmaConfig()
        self._ptr = lib.pg_engine_new(
            world_size,
            self.config.chunk_size,
            int(round(self.config.step_delay * 1e9)),
            int(round(self.config.tick * 1e9)),
            capacity,
            self._loopback,
        )
        if not self._ptr:
            raise TransportError("could not start progress engine")
        lib.pg_engine_set_checksum(self._ptr, self.config.checksum != "none")
        self._closed = False
        self._lock = threading.Lock()
        self._users = weakref.WeakSet()
        # (flag, gen, buffer) of dropped handles still being read.  A deque so that
        # finalizers, which can run anywhere, never need a lock.
        self._parked = collections.deque()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def comm(self, rank):
        if not 0 <= rank < self.world_size:
            raise UnknownDestination(f"rank {rank} not in [0, {self.world_size})")
        return Comm(self, rank)

    def attach(self, user):
        """Register an object with a ``close()`` to run before the engine shuts down."""
        self._users.add(user)

    @property
    def closed(self):
        return self._closed

    def inflight(self):
        return 0 if self._closed else lib.pg_engine_inflight(self._ptr)

    def close(self):
        """Finish queued transfers, then stop the engine. Idempotent."""
        with self._lock:
            if self._closed:
                return
            for user in list(self._users):
                user.close()
            lib.pg_engine_close(self._ptr)
            self._closed = True
        self._teardown()
        lib.pg_engine_free(self._ptr)
        self._parked.clear()

    def _teardown(self):
        pass

    def _drop(self, slot, gen, keepalive=None):
        if self._closed:
            return
        lib.pg_xfer_drop(self._ptr, slot, gen)
        if keepalive is not None:
            flag = ctypes.c_uint64.from_address(lib.pg_flag_ptr(self._ptr, slot))
            if flag.value < gen:
                # the engine may still be reading it; hold the buffer until done
                self._parked.append((flag, gen, keepalive))

    def _unpark(self):
        for _ in range(len(self._parked)):
            p = self._parked.popleft()
            if p[0].value < p[1]:
                self._parked.append(p)

    def _check_open(self):
        if self._closed:
            raise TransportClosed("transport is closed")

    # native call wrappers shared by Comm

    def _prepare(self, src, dst, tag, obj):
        self._check_open()
        self._unpark()
        if not 0 <= dst < self.world_size:
            raise UnknownDestination(f"rank {dst} not in [0, {self.world_size})")
        if tag < 0:
            raise ValueError(f"tag must be non-negative, got {tag}")
        desc = BufferDesc.of(obj)
        gen = ctypes.c_uint64()
        slot = lib.pg_isend_prepare(self._ptr, src, dst, tag, desc.start, desc.len, ctypes.byref(gen))
        if slot == -errno.ESHUTDOWN:
            raise TransportClosed("transport is closed")
        if slot == -errno.EINVAL:
            raise UnknownDestination(f"no route from rank {src} to rank {dst}")
        if slot == -errno.EAGAIN:
            raise TransportError("too many transfers in flight")
        if slot < 0:
            _lib.raise_errno(slot, "isend")
        keep = None if isinstance(obj, BufferDesc) else obj
        return CompletionHandle(self, slot, gen.value, keepalive=keep)

    def _start(self, handle):
        rc = lib.pg_isend_start(self._ptr, handle._slot, handle.generation)
        if rc == -errno.ESHUTDOWN:
            raise TransportClosed("transport is closed")
        if rc < 0:
            raise StaleHandle(f"{handle} cannot be started")

    def _cancel(self, handle):
        handle._finalizer()


class SimulatedDMA(Transport):
    """In-process transport: completed messages land in per-rank inboxes."""


class LoopbackTransport(Transport):
    """Transport whose messages travel as frames over loopback TCP.

    Every rank listens on 127.0.0.1; each ordered (src, dst) pair gets its own
    connection so per-pair FIFO order falls out of the byte stream.
    """

    _loopback = 1

    def __init__(self, world_size, config=None, capacity=8192, host="127.0.0.1"):
        super().__init__(world_size, config, capacity)
        self._sockets = []
        try:
            self._connect_all(host)
        except BaseException:
            self.close()
            raise

    def _connect_all(self, host):
        listeners = []
        for _ in range(self.world_size):
            ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            ls.bind((host, 0))
            ls.listen(self.world_size)
            listeners.append(ls)
            self._sockets.append(ls)
        self.addresses = [ls.getsockname() for ls in listeners]
        for src in range(self.world_size):
            for dst in range(self.world_size):
                out = socket.create_connection(self.addresses[dst])
                out.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                out.sendall(struct.pack("<I", src))
                conn, _ = listeners[dst].accept()
                (peer,) = struct.unpack("<I", _recv_exact(conn, 4))
                if peer != src:
                    raise TransportError(f"handshake mismatch: expected {src}, got {peer}")
                self._sockets += [out, conn]
                lib.pg_engine_set_link(self._ptr, src, dst, out.fileno())
                rc = lib.pg_engine_add_recv(self._ptr, conn.fileno(), dst)
                if rc < 0:
                    raise TransportError("too many loopback connections (max 64)")
        rc = lib.pg_engine_start_reader(self._ptr)
        if rc < 0:
            _lib.raise_errno(rc, "start reader")

    def _teardown(self):
        for s in self._sockets:
            s.close()
        self._sockets = []


def _recv_exact(sock, n):
    data = b""
    while len(data) < n:
        chunk = sock.recv(n - len(data))
        if not chunk:
            raise TransportError("connection closed during handshake")
        data += chunk
    return data


class Comm:
    """One rank's view of a transport."""

    def __init__(self, transport, rank):
        self.transport = transport
        self.rank = rank

    def __repr__(self):
        return f"<Comm rank {self.rank} of {self.transport.world_size}>"

    def isend(self, dst, tag, buffer):
        """Start a zero-copy send of ``buffer``; returns immediately.

        ``buffer`` must stay alive and mapped until the handle completes.
        """
        handle = self.transport._prepare(self.rank, dst, tag, buffer)
        self.transport._start(handle)
        return handle

    def prepare_send(self, dst, tag, buffer):
        """Reserve a transfer without starting it (see ``start``)."""
        return self.transport._prepare(self.rank, dst, tag, buffer)

    def start(self, handle):
        self.transport._start(handle)

    def cancel(self, handle):
        """Discard a prepared, never-started transfer."""
        self.transport._cancel(handle)

    def test(self, handle):
        rc = lib.pg_test(self.transport._ptr, handle._slot, handle.generation)
        if rc < 0:
            raise StaleHandle(f"{handle} is no longer valid")
        return bool(rc)

    def wait(self, handle, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while not handle.completed:
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError(f"{handle} did not complete within {timeout}s")
            time.sleep(0)
        return True

    def send(self, dst, tag, buffer):
        """Blocking send: returns once the transfer has completed."""
        handle = self.isend(dst, tag, buffer)
        self.wait(handle)
        return handle

    def probe(self, src=ANY_SOURCE, tag=ANY_TAG):
        self.transport._check_open()
        return lib.pg_probe(self.transport._ptr, self.rank, src, tag, None) == 1

    def recv(self, src, tag, out, timeout=None, status=None):
        """Receive the oldest matching message into ``out``; returns its byte count.

        Blocks until a match arrives (or ``timeout`` seconds pass). A message
        larger than ``out`` raises ``MessageTooLarge`` and stays queued.
        """
        self.transport._check_open()
        if isinstance(out, BufferDesc):
            addr, cap = out.start, out.len
        else:
            arr = as_byte_array(out)
            if not arr.flags.writeable:
                raise ValueError("recv buffer is read-only")
            addr, cap = arr.ctypes.data, arr.nbytes
        timeout_ns = -1 if timeout is None else int(timeout * 1e9)
        needed = ctypes.c_uint64()
        got_src = ctypes.c_int32()
        got_tag = ctypes.c_int32()
        n = lib.pg_recv(self.transport._ptr, self.rank, src, tag, addr, cap, timeout_ns,
                        ctypes.byref(needed), ctypes.byref(got_src), ctypes.byref(got_tag))
        if n == -errno.EMSGSIZE:
            raise MessageTooLarge(needed.value, cap)
        if n == -errno.ETIMEDOUT:
            raise TimeoutError(f"no message from {src} with tag {tag} within {timeout}s")
        if n == -errno.ESHUTDOWN:
            raise TransportClosed("transport is closed")
        if n < 0:
            _lib.raise_errno(n, "recv")
        if status is not None:
            status.source, status.tag, status.count = got_src.value, got_tag.value, n
        return n

    def recv_bytes(self, src=ANY_SOURCE, tag=ANY_TAG, timeout=None, status=None):
        """Receive a whole message of unknown size as ``bytes``."""
        size = 0
        while True:
            out = np.empty(max(size, 1), dtype=np.uint8)
            try:
                n = self.recv(src, tag, out, timeout=timeout, status=status)
            except MessageTooLarge as exc:
                size = exc.required
                continue
            return out[:n].tobytes()

    def corruption_report(self, handle):
        if self.transport.config.checksum == "none":
            raise TransportError("checksums are disabled on this transport")
        out = (ctypes.c_uint64 * 6)()
        rc = lib.pg_report(self.transport._ptr, handle._slot, handle.generation, out)
        if rc == -errno.EAGAIN:
            raise IncompleteHandle(f"{handle} has not completed")
        if rc < 0:
            raise StaleHandle(f"{handle} is no longer valid")
        return CorruptionReport(handle.id, *out)
