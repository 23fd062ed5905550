"""ctypes bindings for the compiled core in ``_native.c``.

Calls through a ``CDLL`` release the GIL, which matters here: a Python thread
may block inside the fault handler while the DMA progress thread (pure C)
finishes the transfer it is waiting on.
"""

import ctypes
import errno
import importlib.util
import os

from ctypes import POINTER, c_int, c_int32, c_int64, c_uint32, c_uint64, c_void_p

_spec = importlib.util.find_spec("pageguard._native")
if _spec is None or _spec.origin is None:
    raise ImportError("pageguard._native is not built; run `pip install -e .`")

lib = ctypes.CDLL(_spec.origin)

u64p = POINTER(c_uint64)


class Event(ctypes.Structure):
    _fields_ = [
        ("addr", c_uint64),
        ("wait_ns", c_uint64),
        ("op_id", c_uint64),
        ("kind", c_int32),
        ("false_positive", c_int32),
    ]


def _sig(name, restype, *argtypes):
    fn = getattr(lib, name)
    fn.restype = restype
    fn.argtypes = list(argtypes)
    return fn


_sig("pg_now_ns", c_uint64)
_sig("pg_fnv1a64", c_uint64, c_void_p, c_uint64)

_sig("pg_reg_new", c_void_p, c_uint64, c_uint32, c_uint64)
_sig("pg_reg_free", None, c_void_p)
_sig("pg_reg_register", c_int64, c_void_p, c_uint64, c_uint64, c_uint64, c_uint64, c_uint64, c_void_p, c_uint64)
_sig("pg_reg_release", c_int64, c_void_p, c_int32, c_uint64, u64p, c_uint64)
_sig("pg_reg_lookup", c_int, c_void_p, c_uint64, u64p, POINTER(c_int32))
_sig("pg_reg_refcount", c_int32, c_void_p, c_uint64)
_sig("pg_reg_pages", c_int64, c_void_p, u64p, c_uint64)
_sig("pg_reg_live", c_uint32, c_void_p)
_sig("pg_reg_needs_release", c_int, c_void_p, c_int32, c_uint64)

_sig("pg_guard_install", c_int)
_sig("pg_guard_is_installed", c_int)
_sig("pg_guard_bind", None, c_void_p)
_sig("pg_guard_config", None, c_uint32, c_uint64)
_sig("pg_guard_stats", None, u64p)
_sig("pg_guard_events", c_uint64, POINTER(Event), c_uint64, c_uint64)
_sig("pg_protect", c_int, c_uint64, c_uint64)
_sig("pg_unprotect", c_int, c_uint64, c_uint64)
_sig("pg_guard_register_protect", c_int64, c_void_p, c_uint64, c_uint64, c_uint64, c_uint64, c_uint64, c_void_p, c_uint64)
_sig("pg_guard_release", c_int64, c_void_p, c_int32, c_uint64, u64p, c_uint64)

_sig("pg_engine_new", c_void_p, c_int, c_uint64, c_uint64, c_uint64, c_uint32, c_int)
_sig("pg_engine_set_checksum", None, c_void_p, c_int)
_sig("pg_engine_set_link", c_int, c_void_p, c_int, c_int, c_int)
_sig("pg_engine_add_recv", c_int, c_void_p, c_int, c_int)
_sig("pg_engine_start_reader", c_int, c_void_p)
_sig("pg_engine_inflight", c_uint32, c_void_p)
_sig("pg_engine_close", None, c_void_p)
_sig("pg_engine_free", None, c_void_p)
_sig("pg_isend_prepare", c_int64, c_void_p, c_int, c_int, c_int, c_uint64, c_uint64, u64p)
_sig("pg_isend_start", c_int, c_void_p, c_int32, c_uint64)
_sig("pg_xfer_drop", c_int, c_void_p, c_int32, c_uint64)
_sig("pg_test", c_int, c_void_p, c_int32, c_uint64)
_sig("pg_flag_ptr", c_void_p, c_void_p, c_int32)
_sig("pg_bytes_sent", c_uint64, c_void_p, c_int32)
_sig("pg_report", c_int, c_void_p, c_int32, c_uint64, u64p)
_sig("pg_probe", c_int, c_void_p, c_int, c_int, c_int, u64p)
_sig("pg_recv", c_int64, c_void_p, c_int, c_int, c_int, c_void_p, c_uint64, c_int64, u64p,
     POINTER(c_int32), POINTER(c_int32))

# indices into pg_guard_stats output
STAT_PROTECTS = 0
STAT_UNPROTECTS = 1
STAT_FAULTS_GUARDED = 2
STAT_FAULTS_FP = 3
STAT_BLOCK_NS = 4
STAT_FAULTS_UNRELATED = 5
STAT_FAULTS_STALE = 6
STAT_N = 7

KIND_GUARDED = 1
KIND_UNRELATED = 2


def raise_errno(rc, what):
    code = -rc
    raise OSError(code, f"{what}: {os.strerror(code)}")


def guard_stats():
    out = (c_uint64 * STAT_N)()
    lib.pg_guard_stats(out)
    return list(out)


def now_ns():
    return lib.pg_now_ns()


ENOSPC = errno.ENOSPC
EBUSY = errno.EBUSY
ENOENT = errno.ENOENT
ESTALE = errno.ESTALE
EAGAIN = errno.EAGAIN
EINVAL = errno.EINVAL
EDOM = errno.EDOM
ESHUTDOWN = errno.ESHUTDOWN
ETIMEDOUT = errno.ETIMEDOUT
EMSGSIZE = errno.EMSGSIZE
