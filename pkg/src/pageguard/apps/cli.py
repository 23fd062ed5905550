"""Entry points for ``pageguard-demo`` and ``pageguard-bench``."""

import argparse
import json
import sys

from ..guard import GuardConfig
from ..transport import DmaConfig
from .bench import DEFAULT_SIZES, MODES, run_bench
from .worker import DemoConfig, WorkerMode, run_worker


def _int_list(text):
    return [int(s) for s in text.split(",") if s.strip()]


def _str_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def demo_parser():
    p = argparse.ArgumentParser(
        prog="pageguard-demo",
        description="Serve a put/get table under load and count torn values seen by getters.",
    )
    p.add_argument("--mode", choices=[m.value for m in WorkerMode], default="guard")
    p.add_argument("--workers", type=int, default=4, help="getter clients (default 4)")
    p.add_argument("--putters", type=int, default=1)
    p.add_argument("--keys", type=int, default=256)
    p.add_argument("--duration", type=float, default=10.0, help="seconds")
    p.add_argument("--hot-key", type=float, default=0.0,
                   help="fraction of requests sent to key 0 (default 0: uniform)")
    p.add_argument("--gets-per-put", type=int, default=4)
    p.add_argument("--pack-values", action="store_true", help="four values per page")
    p.add_argument("--guard-disable", action="store_true",
                   help="send zero-copy with no protection (shows the corruption)")
    p.add_argument("--guard-threshold", type=int, default=0,
                   help="bytes; smaller sends are copied (default 0: protect every value)")
    p.add_argument("--guard-capacity", type=int, default=GuardConfig.capacity)
    p.add_argument("--guard-watchdog-ms", type=int, default=0)
    p.add_argument("--dma-chunk", type=int, default=4096)
    p.add_argument("--dma-delay-us", type=float, default=1000.0)
    p.add_argument("--transport", choices=["sim", "loopback"], default="sim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    return p


def demo_config(args):
    return DemoConfig(
        getters=args.workers,
        putters=args.putters,
        keys=args.keys,
        duration=args.duration,
        hot_key=args.hot_key,
        gets_per_put=args.gets_per_put,
        pack_values=args.pack_values,
        guard_disable=args.guard_disable,
        guard_threshold=args.guard_threshold,
        guard=GuardConfig(capacity=args.guard_capacity, watchdog_ms=args.guard_watchdog_ms),
        dma=DmaConfig(chunk_size=args.dma_chunk, step_delay=args.dma_delay_us * 1e-6),
        transport=args.transport,
        seed=args.seed,
    )


def demo_main(argv=None):
    args = demo_parser().parse_args(argv)
    if args.workers < 1 or args.keys < 1 or args.putters < 0:
        print("pageguard-demo: need --workers >= 1, --keys >= 1, --putters >= 0", file=sys.stderr)
        return 1
    try:
        report = run_worker(args.mode, demo_config(args))
    except Exception as exc:
        print(f"pageguard-demo: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(report.as_dict(), indent=2))
    else:
        print(f"mode={report.mode} gets={report.gets} puts={report.puts} torn={report.torn} "
              f"protects={report.protects} faults_guarded={report.faults_guarded} "
              f"faults_false_positive={report.faults_false_positive} "
              f"block_time={report.block_time:.3f}s elapsed={report.elapsed:.2f}s")
        for err in report.errors:
            print(f"error: {err}", file=sys.stderr)
    return report.exit_status


def bench_parser():
    p = argparse.ArgumentParser(
        prog="pageguard-bench",
        description="Per-message cost of copy versus protect sends across message sizes.",
    )
    p.add_argument("--sizes", type=_int_list, default=list(DEFAULT_SIZES),
                   help="comma-separated byte counts")
    p.add_argument("--modes", type=_str_list, default=list(MODES))
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--overlap", action="store_true",
                   help="write the buffer straight after sending, while the transfer runs")
    p.add_argument("--dma-chunk", type=int, default=4096)
    p.add_argument("--dma-delay-us", type=float, default=0.0)
    p.add_argument("--out", help="write CSV (or JSON with --json) here instead of stdout")
    p.add_argument("--json", action="store_true")
    return p


def bench_main(argv=None):
    args = bench_parser().parse_args(argv)
    bad = [m for m in args.modes if m not in MODES]
    if bad or any(s < 0 for s in args.sizes) or args.iterations < 1:
        print("pageguard-bench: bad --modes, --sizes or --iterations", file=sys.stderr)
        return 1
    report = run_bench(
        args.sizes, args.modes, iterations=args.iterations, warmup=args.warmup,
        dma=DmaConfig(chunk_size=args.dma_chunk, step_delay=args.dma_delay_us * 1e-6,
                      checksum="none"),
        overlap=args.overlap,
    )
    text = report.to_json() + "\n" if args.json else report.to_csv()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    if not args.json:
        print(f"crossover_size={report.crossover_size} "
              f"crossover_estimate={report.crossover_estimate}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(demo_main())
