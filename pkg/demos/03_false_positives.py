"""
False positives at page granularity
===================================

Protection works on whole pages.  Two unrelated buffers on one page share
its fate: sending one makes writes to the other wait too.  That is safe, only
wasteful, and the handler counts it as a false positive.  A buffer on another
page is untouched.
"""

import time

from pageguard import DmaConfig, FaultLog, GuardedSender, SendPolicy, SimulatedDMA, alloc_pages

transport = SimulatedDMA(2, DmaConfig(chunk_size=256, step_delay=5e-3))
sender = GuardedSender(transport.comm(0), SendPolicy(threshold=1))

page = alloc_pages(2 * 4096)
a, b = page[:1024], page[2048:3072]
elsewhere = page[4096 + 64:4096 + 128]

with FaultLog() as log:
    sender.send_and_protect(1, 0, a)

    t0 = time.perf_counter()
    elsewhere[0] = 1
    print(f"write on another page: {(time.perf_counter() - t0) * 1e6:.0f} us")

    t0 = time.perf_counter()
    b[0] = 1
    print(f"write to neighbour b:  {(time.perf_counter() - t0) * 1e3:.1f} ms")

for event in log.events:
    print(event)
sender.wait_all()
print("false positives:", sender.guard_stats().faults_false_positive)
transport.close()
