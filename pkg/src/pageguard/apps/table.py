"""The distributed-table records used by the demo worker.

A value is a fixed 1024-byte record: an 8-byte little-endian version, a body
derived from (key, version), and a trailing 8-byte FNV-1a of everything before
it.  A reader that catches a value mid-update sees a checksum mismatch.
"""

import numpy as np

from ..guard import alloc_pages
from ..registry import PAGE_SIZE
from ..transport import checksum64

VALUE_SIZE = 1024
KEY_SIZE = 8
PUT_SIZE = KEY_SIZE + VALUE_SIZE
GET_SIZE = KEY_SIZE
VALUES_PER_PACKED_PAGE = 4

PUT_REQUEST = 1
GET_REQUEST = 2
GET_RESPONSE = 3


def fill_value(out, key, version):
    out[:8] = np.frombuffer(int(version).to_bytes(8, "little"), dtype=np.uint8)
    out[8:-8] = (key * 131 + version * 29) & 0xFF
    out[-8:] = np.frombuffer(checksum64(out[:-8]).to_bytes(8, "little"), dtype=np.uint8)
    return out


def make_value(key, version):
    return fill_value(np.empty(VALUE_SIZE, dtype=np.uint8), key, version)


def value_version(value):
    return int.from_bytes(value[:8].tobytes(), "little")


def value_is_consistent(value):
    stored = int.from_bytes(value[-8:].tobytes(), "little")
    return checksum64(value[:-8]) == stored


def make_put(key, version):
    rec = np.empty(PUT_SIZE, dtype=np.uint8)
    rec[:KEY_SIZE] = np.frombuffer(int(key).to_bytes(8, "little"), dtype=np.uint8)
    fill_value(rec[KEY_SIZE:], key, version)
    return rec


def make_get(key):
    return np.frombuffer(int(key).to_bytes(8, "little"), dtype=np.uint8).copy()


def record_key(rec):
    return int.from_bytes(rec[:KEY_SIZE].tobytes(), "little")


class Table:
    """``keys`` values in page-aligned memory.

    By default every value gets a page to itself.  ``pack_values`` puts four
    values on each page, which makes writes to one value block behind sends
    of its page neighbours (false positives at page granularity).
    """

    def __init__(self, keys, pack_values=False, page_size=PAGE_SIZE):
        self.keys = keys
        self.pack_values = pack_values
        self.stride = VALUE_SIZE if pack_values else max(page_size, VALUE_SIZE)
        self.arena = alloc_pages(self.stride * keys, page_size)
        for k in range(keys):
            fill_value(self.value(k), k, 0)

    def value(self, key):
        off = key * self.stride
        return self.arena[off:off + VALUE_SIZE]

    def __len__(self):
        return self.keys
