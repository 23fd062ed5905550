"""A put/get table server run three ways, plus the clients that load it.

Rank 0 owns the table and runs a single-threaded service loop.  One or more
putter clients overwrite values; getter clients fetch them and check every
response for tearing.  The server answers gets differently per mode:

* ``blocking``: a blocking send, so nothing else happens until it lands.
* ``manual``: a non-blocking send plus an explicit map of keys with sends in
  flight; a put to such a key spins until those sends finish.
* ``guard``: ``send_and_protect``.  The put path is a plain write; if the
  value is still being sent the write blocks in the fault handler.
"""

import collections
import enum
import random
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..guard import GuardConfig, MemoryGuard, default_guard
from ..send import GuardedSender, SendPolicy
from ..transport import ANY_SOURCE, DmaConfig, LoopbackTransport, SimulatedDMA, Status
from .table import (
    GET_REQUEST,
    GET_RESPONSE,
    GET_SIZE,
    KEY_SIZE,
    PUT_REQUEST,
    PUT_SIZE,
    VALUE_SIZE,
    Table,
    make_get,
    make_put,
    record_key,
    value_is_consistent,
)

SERVER = 0
IDLE_SLEEP = 50e-6


class WorkerMode(enum.Enum):
    BLOCKING = "blocking"
    MANUAL = "manual"
    GUARD = "guard"


@dataclass
class DemoConfig:
    getters: int = 4
    putters: int = 1
    keys: int = 256
    duration: float = 10.0
    hot_key: float = 0.0  # fraction of requests aimed at key 0
    gets_per_put: int = 4
    pack_values: bool = False
    guard_disable: bool = False
    # 0 protects every 1 KiB value; the library default (one page) would copy them all
    guard_threshold: int = 0
    guard: GuardConfig = field(default_factory=GuardConfig)
    dma: DmaConfig = field(default_factory=lambda: DmaConfig(chunk_size=4096, step_delay=1e-3))
    transport: str = "sim"
    seed: int = 0


@dataclass
class ConsistencyReport:
    mode: str
    gets: int = 0
    puts: int = 0
    torn: int = 0
    elapsed: float = 0.0
    protects: int = 0
    copies: int = 0
    faults_guarded: int = 0
    faults_false_positive: int = 0
    block_time: float = 0.0
    errors: list = field(default_factory=list)

    @property
    def exit_status(self):
        if self.errors:
            return 1
        return 2 if self.torn else 0

    def as_dict(self):
        d = asdict(self)
        d["exit_status"] = self.exit_status
        return d


class TableServer:
    """The single-threaded service loop shared by every mode."""

    def __init__(self, comm, table, stop):
        self.comm = comm
        self.table = table
        self.stop = stop
        self.puts = 0
        self.gets = 0

    def serve(self):
        comm = self.comm
        put = np.empty(PUT_SIZE, dtype=np.uint8)
        get = np.empty(GET_SIZE, dtype=np.uint8)
        status = Status()
        while not self.stop.is_set():
            idle = True
            if comm.probe(ANY_SOURCE, PUT_REQUEST):
                comm.recv(ANY_SOURCE, PUT_REQUEST, put)
                self.handle_put(record_key(put), put[KEY_SIZE:])
                self.puts += 1
                idle = False
            if comm.probe(ANY_SOURCE, GET_REQUEST):
                comm.recv(ANY_SOURCE, GET_REQUEST, get, status=status)
                self.handle_get(status.source, record_key(get))
                self.gets += 1
                idle = False
            self.progress()
            if idle:
                time.sleep(IDLE_SLEEP)
        self.drain()

    def handle_put(self, key, value):
        raise NotImplementedError

    def handle_get(self, requester, key):
        raise NotImplementedError

    def progress(self):
        pass

    def drain(self):
        pass


class BlockingServer(TableServer):
    def handle_put(self, key, value):
        self.table.value(key)[:] = value

    def handle_get(self, requester, key):
        self.comm.send(requester, GET_RESPONSE, self.table.value(key))


class ManualTrackingServer(TableServer):
    def __init__(self, comm, table, stop):
        super().__init__(comm, table, stop)
        self.active = collections.Counter()
        self.pending = []

    def handle_put(self, key, value):
        while self.active[key]:
            self.check_for_completed()
            time.sleep(0)
        self.table.value(key)[:] = value

    def handle_get(self, requester, key):
        self.active[key] += 1
        self.pending.append((self.comm.isend(requester, GET_RESPONSE, self.table.value(key)), key))

    def check_for_completed(self):
        still = []
        for handle, key in self.pending:
            if handle.completed:
                self.active[key] -= 1
            else:
                still.append((handle, key))
        self.pending = still

    progress = check_for_completed

    def drain(self):
        while self.pending:
            self.check_for_completed()
            time.sleep(0)


class PageGuardServer(TableServer):
    def __init__(self, comm, table, stop, sender):
        super().__init__(comm, table, stop)
        self.sender = sender

    def handle_put(self, key, value):
        self.table.value(key)[:] = value

    def handle_get(self, requester, key):
        self.sender.send_and_protect(requester, GET_RESPONSE, self.table.value(key))

    def progress(self):
        self.sender.check_for_completed()

    def drain(self):
        self.sender.wait_all()


class _Load:
    """State shared by the load generators."""

    def __init__(self, config):
        self.config = config
        self.stop = threading.Event()
        self.lock = threading.Lock()
        self.gets = 0
        self.puts = 0
        self.torn = 0
        self.errors = []

    def pick_key(self, rng):
        cfg = self.config
        if cfg.hot_key and rng.random() < cfg.hot_key:
            return 0
        return rng.randrange(cfg.keys)


def _getter(comm, load, seed):
    rng = random.Random(seed)
    resp = np.empty(VALUE_SIZE, dtype=np.uint8)
    try:
        while not load.stop.is_set():
            comm.send(SERVER, GET_REQUEST, make_get(load.pick_key(rng)))
            comm.recv(SERVER, GET_RESPONSE, resp, timeout=10.0)
            ok = value_is_consistent(resp)
            with load.lock:
                load.gets += 1
                if not ok:
                    load.torn += 1
    except Exception as exc:  # reported through the consistency report
        load.errors.append(f"getter {comm.rank}: {exc!r}")
        load.stop.set()


def _putter(comm, load, seed):
    rng = random.Random(seed)
    versions = collections.Counter()
    ratio = load.config.gets_per_put
    try:
        while not load.stop.is_set():
            if ratio and load.gets < load.puts * ratio:
                time.sleep(IDLE_SLEEP)
                continue
            key = load.pick_key(rng)
            versions[key] += 1
            comm.send(SERVER, PUT_REQUEST, make_put(key, versions[key]))
            with load.lock:
                load.puts += 1
    except Exception as exc:
        load.errors.append(f"putter {comm.rank}: {exc!r}")
        load.stop.set()


def _make_transport(config, world):
    if config.transport == "sim":
        return SimulatedDMA(world, config.dma)
    if config.transport == "loopback":
        return LoopbackTransport(world, config.dma)
    raise ValueError(f"unknown transport {config.transport!r}")


def run_worker(mode, config=None):
    """Run the table server in ``mode`` under load for ``config.duration`` seconds."""
    mode = WorkerMode(mode)
    config = config or DemoConfig()
    world = 1 + config.putters + config.getters
    report = ConsistencyReport(mode.value)
    load = _Load(config)
    server_stop = threading.Event()
    sender = None
    t0 = time.monotonic()
    with _make_transport(config, world) as transport:
        table = Table(config.keys, pack_values=config.pack_values)
        comm = transport.comm(SERVER)
        if mode is WorkerMode.BLOCKING:
            server = BlockingServer(comm, table, server_stop)
        elif mode is WorkerMode.MANUAL:
            server = ManualTrackingServer(comm, table, server_stop)
        else:
            guard = None if config.guard_disable else _guard_for(config.guard)
            policy = SendPolicy(threshold=config.guard_threshold)
            sender = GuardedSender(comm, policy, guard=guard, disabled=config.guard_disable)
            server = PageGuardServer(comm, table, server_stop, sender)

        def serve():
            try:
                server.serve()
            except Exception as exc:
                load.errors.append(f"server: {exc!r}")
                load.stop.set()

        threads = [threading.Thread(target=serve, name="server")]
        rank = 1
        for i in range(config.putters):
            threads.append(threading.Thread(target=_putter, args=(transport.comm(rank), load, config.seed * 1000 + rank)))
            rank += 1
        for i in range(config.getters):
            threads.append(threading.Thread(target=_getter, args=(transport.comm(rank), load, config.seed * 1000 + rank)))
            rank += 1
        for t in threads:
            t.start()
        load.stop.wait(config.duration)
        load.stop.set()
        for t in threads[1:]:
            t.join()
        server_stop.set()
        threads[0].join()
        if sender is not None:
            stats = sender.guard_stats()
            report.protects = stats.protects
            report.copies = stats.copies
            report.faults_guarded = stats.faults_guarded
            report.faults_false_positive = stats.faults_false_positive
            report.block_time = stats.total_block_time
    report.elapsed = time.monotonic() - t0
    report.gets = load.gets
    report.puts = load.puts
    report.torn = load.torn
    report.errors = list(load.errors)
    return report


def _guard_for(guard_config):
    if guard_config == GuardConfig():
        return default_guard()
    return MemoryGuard(config=guard_config).install()
