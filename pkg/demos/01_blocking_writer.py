"""
A writer blocks on an in-flight send
====================================

A 40 KiB buffer goes out through a slow simulated DMA engine: ten 4 KiB
chunks, 5 ms apiece.  Its pages are read-only while the send runs, so the
write below waits in the fault handler for the remaining chunks, then lands.
The receiver still gets the bytes as they were when the send started.
"""

import time

import numpy as np

from pageguard import DmaConfig, GuardedSender, SimulatedDMA, alloc_pages

transport = SimulatedDMA(2, DmaConfig(chunk_size=4096, step_delay=5e-3))
tx, rx = transport.comm(0), transport.comm(1)
sender = GuardedSender(tx)

# page-aligned memory, so the guard covers exactly this buffer
buf = alloc_pages(10 * 4096)
buf[:] = 1

token = sender.send_and_protect(1, 0, buf)
print("path taken:", token.kind)

# let the first chunk go out, then overwrite byte 0
while token.handle.bytes_sent < 4096:
    time.sleep(1e-4)
t0 = time.perf_counter()
buf[0] = 99
print(f"write blocked for {(time.perf_counter() - t0) * 1e3:.1f} ms")

received = np.frombuffer(rx.recv_bytes(0, 0, timeout=5), dtype=np.uint8)
print("receiver saw byte 0 =", received[0], "| sender now holds", buf[0])
print("corrupted:", tx.corruption_report(token.handle).corrupted)

sender.check_for_completed()
print(sender.guard_stats())
transport.close()
