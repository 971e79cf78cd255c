"""
Reliable delivery over a lossy mesh
===================================

Drives the message layer directly: a session, a burst of reliable sends at
several loss rates, and the retransmission counts that result.
"""

import numpy as np

from mattersim import msglayer, netsim

SECRET = bytes(range(16))


def run(loss, sends=500, seed=1):
    sub = netsim.Subnet("mesh", "thread", [1, 2], loss=loss, link_retries=0)
    sim = netsim.Simulator(netsim.Topology([sub]), seed=seed)
    a_ml = msglayer.MessageLayer(sim, 1, SECRET)
    msglayer.MessageLayer(sim, 2, SECRET)
    session = a_ml.establish_session(2)
    sim.run_until(5 * netsim.NS_PER_S)
    s = session.result()
    handles = []
    for i in range(sends):
        sim.schedule(i * 20 * netsim.NS_PER_MS,
                     lambda i=i: handles.append(a_ml.send(s, 8, b"ping", exchange_id=i + 1, initiator=True)))
    sim.run_to_completion()
    tx = np.array([h.transmissions for h in handles])
    failed = sum(h.status == "failed" for h in handles)
    return tx.mean(), failed, sim.stats.total("standalone_acks")


# %%
# Loss applies in both directions here, so a lost ACK also costs a retransmission.
for loss in [0.0, 0.05, 0.1, 0.2, 0.3]:
    mean_tx, failed, acks = run(loss)
    print(f"loss {loss:.2f}  mean transmissions {mean_tx:.3f}  failed {failed}  standalone acks {acks}")

# %%
# The retransmission schedule under total loss.
m = msglayer.MrpConfig()
print([t // netsim.NS_PER_MS for t in m.retransmission_offsets_ns()], "ms after the first send")
