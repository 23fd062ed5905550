"""
Where protection starts to pay
==============================

Copying costs time proportional to the message; protecting costs a roughly
fixed amount per send plus a little per page.  Sweeping sizes shows the two
lines and where they cross.  Run ``pageguard-bench`` for the same numbers as
CSV or JSON.
"""

from pageguard.apps.bench import run_bench

report = run_bench(sizes=[64, 4096, 65536, 1 << 20, 4 << 20], iterations=100)
print(f"{'size':>8} {'mode':>8} {'us/msg':>9} {'stall p99 us':>13}")
for r in report.records:
    print(f"{r.size:>8} {r.mode:>8} {r.cost_us:>9.1f} {r.stall_p99_us:>13.1f}")
print("protect first wins at", report.crossover_size, "bytes")
print(f"fitted crossover ~{report.crossover_estimate:.0f} bytes" if report.crossover_estimate
      else "no crossover in the fitted range")
