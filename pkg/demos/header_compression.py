"""
Compressing message headers with a static context
=================================================

Builds a compression context from the headers in a simulated trace and
measures how much of each header survives.
"""

from mattersim import encap, scenario, schc
from mattersim.msglayer import MessageHeader

# %%
# Simulate the bundled lossy star scenario and pull every header off the trace.
result = scenario.run(scenario.load(scenario.bundled("star_4hop_lossy.json")))
headers = []
for row in result.sim.trace:
    if row.event_kind == "msg_tx":
        hdr_hex = dict(kv.split("=", 1) for kv in row.detail.split(";"))["hdr"]
        headers.append(((row.src, row.dst), MessageHeader.decode(bytes.fromhex(hdr_hex))[0]))

# %%
# One rule per flow, plus a companion rule for headers that carry an ACK.
ctx = schc.build_context(schc.flows_from_headers(h for _, h in headers))
print(len(ctx.rules), "rules, context", ctx.digest[:16])

senders = {}
before = after = 0
for pair, h in headers:
    out = senders.setdefault(pair, schc.SchcCompressor(ctx)).compress(h)
    before += h.length
    after += len(out)
print(f"{len(headers)} headers: {before} -> {after} bytes ({100 * (1 - after / before):.1f}% saved)")

# %%
# What that means for the lighting command frame.
print("18-byte header:", encap.thread_breakdown(18, 25).total_bytes, "bytes on air")
print(" 2-byte header:", encap.thread_breakdown(2, 25, allow_compressed_header=True).total_bytes, "bytes on air")
