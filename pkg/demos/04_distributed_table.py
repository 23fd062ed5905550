"""
The put/get table, three ways
=============================

A server owns a table of 1 KiB values.  One client overwrites values, four
others read them and check each response's internal checksum.  The DMA engine
is slow on purpose, so sends overlap with later puts.

* ``blocking`` waits for every send before doing anything else.
* ``manual`` tracks keys with sends in flight and spins on puts to them.
* ``guard`` sends with ``send_and_protect``; puts are plain writes.

Turning the guard off shows the torn values the other modes prevent.
"""

from pageguard.apps.worker import DemoConfig, run_worker

for mode, disable in [("blocking", False), ("manual", False), ("guard", False), ("guard", True)]:
    report = run_worker(mode, DemoConfig(duration=2.0, hot_key=0.9, guard_disable=disable))
    label = mode + (" (guard off)" if disable else "")
    print(f"{label:<18} gets={report.gets:<5} puts={report.puts:<4} torn={report.torn:<4} "
          f"blocked={report.block_time * 1e3:.0f} ms")
