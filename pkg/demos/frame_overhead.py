"""
Where the bytes of a Thread frame go
====================================

Per-layer accounting for a small command, with and without the 6LoWPAN
optimizations, and the RTT that follows from those frame sizes.
"""

import numpy as np

from mattersim import encap, perfmodel

# %%
# A 25-byte command behind an 18-byte message header, single hop.
bd = encap.thread_breakdown(18, 25)
for name, size in bd.layers:
    print(f"{name:15s} {size:4d}")
print("total", bd.total_bytes)

# %%
# Each optimization letter trims a different layer.
for letters in ["", "a", "b", "c", "a,b,c"]:
    opts = encap.CompressionOptions.from_letters(letters)
    print(f"{letters or '-':6s}", encap.thread_breakdown(18, 25, opts=opts).total_bytes)

# %%
# Payload sweep: the frame grows linearly until fragmentation kicks in.
payloads = np.arange(0, 121, 10)
totals = np.array([encap.thread_breakdown(18, int(p)).total_bytes for p in payloads])
frags = np.array([encap.thread_breakdown(18, int(p)).fragment_count for p in payloads])
print(np.column_stack([payloads, totals, frags]))
print("largest single-frame payload:", encap.max_unfragmented_payload(False, encap.NO_COMPRESSION))

# %%
# Theoretical RTT for the lighting request/response pair over 1..4 hops.
for hops in range(1, 5):
    print(hops, f"{perfmodel.rtt_for_payloads('thread', hops) * 1e3:.3f} ms")
