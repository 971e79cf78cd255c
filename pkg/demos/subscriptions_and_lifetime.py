"""
Subscriptions and battery lifetime
==================================

A controller subscribes to a temperature sensor; the simulated report
traffic is then priced with the sleepy-device energy model.
"""

import numpy as np

from mattersim import datamodel as dm
from mattersim import interaction as im
from mattersim import msglayer, netsim, perfmodel
from mattersim.datamodel import Path

SECRET = bytes(range(16))
HOURS = 6

# %%
# Two nodes, one Thread hop. Node 2 hosts a temperature cluster.
sub = netsim.Subnet("mesh", "thread", [1, 2])
sim = netsim.Simulator(netsim.Topology([sub]), seed=3)
fabric = dm.Fabric(1, SECRET, [dm.Node(1, [dm.Endpoint(1, [])]),
                               dm.Node(2, [dm.Endpoint(1, [dm.build_temperature_cluster()])])])
engines = {n: im.InteractionEngine(msglayer.MessageLayer(sim, n, SECRET), fabric, n) for n in (1, 2)}

# %%
# Subscribe with min 5 s and max 600 s, then drift the temperature every 2 minutes.
path = Path(dm.TEMPERATURE_CLUSTER, dm.ATTR_MEASURED_VALUE, node=2, endpoint=1)
h = engines[1].start_subscribe([path], 5, 600)
sim.run_until(sim.now + 10 * netsim.NS_PER_S)
cluster = fabric.nodes[2].cluster(1, dm.TEMPERATURE_CLUSTER)
rng = np.random.default_rng(3)
t0 = sim.now
for k in range(HOURS * 30):
    sim.schedule_at(t0 + k * 120 * netsim.NS_PER_S, cluster.set, dm.ATTR_MEASURED_VALUE,
                    int(2150 + rng.normal(0, 40)))
sim.run_until(t0 + HOURS * 3600 * netsim.NS_PER_S)
pub = engines[2].publications[h.result().id]
gaps = np.diff(pub.report_times) / netsim.NS_PER_S
print(f"{len(pub.report_times)} reports, spacing {gaps.min():.1f}..{gaps.max():.1f} s")

# %%
# Frame bytes the sensor put on air for reports, and what the energy model makes of it.
frames = [r.bytes for r in sim.trace if r.event_kind == "frame_tx" and r.src == 2 and "op=0x05" in r.flags]
frame = int(np.median(frames))
period = HOURS * 3600 / len(frames)
for si in [1, 30, 300, 3600]:
    q = perfmodel.LifetimeQuery(perfmodel.EnergyProfile(), si, period, frame)
    print(f"sleep {si:5d} s  report every {period:.0f} s  {perfmodel.lifetime(q):6.2f} years")
