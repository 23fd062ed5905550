"""Copy versus protect, swept over message size.

Each iteration sends one message, lets the receiver take it, writes the first
byte of the send buffer (the application reusing it) and harvests completions.
The per-message cost is the sender thread's CPU time for the send call, the
write and the harvest.  Transfer work runs on the progress thread and is common
to both modes, so it is left out (on a single CPU it would otherwise land in
whichever timed region the progress thread happened to preempt).  The write
alone is the stall, measured in wall time; in protect mode it takes a fault to
reopen the page.

With ``overlap=True`` the write happens straight after the send instead, so in
protect mode it blocks until the transfer finishes.
"""

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..guard import alloc_pages, default_guard
from ..send import GuardedSender, SendMode, SendPolicy
from ..transport import DmaConfig, SimulatedDMA

COLUMNS = ("size", "mode", "throughput_mbps", "stall_mean_us", "stall_p99_us",
           "faults_guarded", "faults_false_positive")
MODES = {"copy": SendMode.ALWAYS_COPY, "protect": SendMode.ALWAYS_PROTECT}
DEFAULT_SIZES = (64, 4096, 65536, 1048576)
TAG = 7


@dataclass(frozen=True)
class BenchRecord:
    size: int
    mode: str
    throughput_mbps: float
    stall_mean_us: float
    stall_p99_us: float
    faults_guarded: int
    faults_false_positive: int

    @property
    def cost_us(self):
        """Mean per-message cost implied by the throughput."""
        return self.size / self.throughput_mbps if self.throughput_mbps else float("inf")


@dataclass
class BenchReport:
    """Records plus two crossover figures.

    ``crossover_size`` is the smallest swept size where protect won outright.
    ``crossover_estimate`` intersects straight-line fits of per-message cost
    against size, so it is available even when the sweep stops short of the
    crossing.  Either is None when there is nothing to report.
    """

    records: list
    crossover_size: int | None = None
    crossover_estimate: float | None = None

    def to_csv(self):
        return records_to_csv(self.records)

    def to_json(self):
        return json.dumps({"records": [asdict(r) for r in self.records],
                           "crossover_size": self.crossover_size,
                           "crossover_estimate": self.crossover_estimate}, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls([BenchRecord(**r) for r in d["records"]], d.get("crossover_size"),
                   d.get("crossover_estimate"))


def records_to_csv(records):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in COLUMNS)])
    return out.getvalue()


def records_from_csv(text):
    rows = csv.DictReader(io.StringIO(text))
    if tuple(rows.fieldnames or ()) != COLUMNS:
        raise ValueError(f"unexpected CSV header {rows.fieldnames}")
    types = {f.name: f.type for f in fields(BenchRecord)}
    return [BenchRecord(**{k: types[k](v) for k, v in row.items()}) for row in rows]


def crossover(records):
    """Smallest size at which protect throughput reaches copy throughput."""
    by = {(r.size, r.mode): r for r in records}
    for size in sorted({r.size for r in records}):
        c, p = by.get((size, "copy")), by.get((size, "protect"))
        if c and p and p.throughput_mbps >= c.throughput_mbps:
            return size
    return None


def crossover_estimate(records):
    """Size where fitted copy and protect cost lines cross, or None."""
    fits = {}
    for mode in ("copy", "protect"):
        pts = [(r.size, r.cost_us) for r in records if r.mode == mode and r.throughput_mbps > 0]
        if len({x for x, _ in pts}) < 2:
            return None
        x, y = np.array(pts, dtype=float).T
        fits[mode] = np.polyfit(x, y, 1)  # slope (us/byte), intercept (us)
    (bc, ac), (bp, ap) = fits["copy"], fits["protect"]
    if bc <= bp:
        return None  # copy's marginal cost is no worse; protect never catches up
    return float(max((ap - ac) / (bc - bp), 0.0))


def _measure(sender, comm_rx, buf, sink, iterations, warmup, overlap):
    costs = np.empty(iterations)
    stalls = np.empty(iterations)
    before = sender.guard_stats()
    cpu, wall = time.thread_time_ns, time.perf_counter_ns
    for i in range(warmup + iterations):
        c0 = cpu()
        sender.send_and_protect(1, TAG, buf)
        c1 = cpu()
        if not overlap:
            comm_rx.recv(0, TAG, sink)
        c2, w2 = cpu(), wall()
        buf[0] = i & 0xFF
        c3, w3 = cpu(), wall()
        if overlap:
            comm_rx.recv(0, TAG, sink)
        c4 = cpu()
        sender.check_for_completed()
        c5 = cpu()
        if i >= warmup:
            costs[i - warmup] = (c1 - c0) + (c3 - c2) + (c5 - c4)
            stalls[i - warmup] = w3 - w2
    sender.wait_all()
    after = sender.guard_stats()
    return costs, stalls, after.faults_guarded - before.faults_guarded, \
        after.faults_false_positive - before.faults_false_positive


def run_bench(sizes=DEFAULT_SIZES, modes=("copy", "protect"), iterations=200, warmup=20,
              dma=None, overlap=False):
    """Measure every (size, mode) pair; returns a BenchReport."""
    sizes = list(sizes)
    records = []
    if not sizes:
        return BenchReport(records)
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    dma = dma or DmaConfig(step_delay=0.0, checksum="none")
    guard = default_guard()
    with SimulatedDMA(2, dma) as transport:
        tx, rx = transport.comm(0), transport.comm(1)
        for size in sizes:
            buf = alloc_pages(size)
            sink = np.empty(size, dtype=np.uint8)
            for m in modes:
                sender = GuardedSender(tx, SendPolicy(mode_override=MODES[m]), guard=guard,
                                       pool_slots=4, staging_size=max(size, 1))
                costs, stalls, fg, ffp = _measure(sender, rx, buf, sink, iterations, warmup, overlap)
                sender.close()
                mean_cost = max(costs.mean(), 1.0) / 1e3  # us
                records.append(BenchRecord(
                    size=size,
                    mode=m,
                    throughput_mbps=float(size / mean_cost),  # bytes/us == MB/s
                    stall_mean_us=float(stalls.mean() / 1e3),
                    stall_p99_us=float(np.percentile(stalls, 99) / 1e3),
                    faults_guarded=int(fg),
                    faults_false_positive=int(ffp),
                ))
    return BenchReport(records, crossover(records), crossover_estimate(records))
