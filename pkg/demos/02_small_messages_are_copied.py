"""
Small messages take the copy path
=================================

Protecting memory costs a few system calls and possibly a fault, which is
far more than copying a handful of bytes.  Below the threshold (one page by
default) ``send_and_protect`` copies into a staging slot and the caller's
buffer is free at once.
"""

import numpy as np

from pageguard import DmaConfig, GuardedSender, SendPolicy, SimulatedDMA, alloc_pages

transport = SimulatedDMA(2, DmaConfig(step_delay=1e-3))
tx, rx = transport.comm(0), transport.comm(1)
sender = GuardedSender(tx, SendPolicy(threshold=4096))

small = np.arange(64, dtype=np.uint8)
big = alloc_pages(64 * 1024)

for msg in (small, big):
    token = sender.send_and_protect(1, 0, msg)
    print(f"{msg.nbytes:>6} bytes -> {token.kind}")

# the small buffer can be reused straight away; the big one is guarded
small[:] = 0
sender.wait_all()
print(sender.guard_stats())
transport.close()
