from __future__ import annotations

from dataclasses import dataclass

import pytest

from mattersim import datamodel as dm
from mattersim import interaction as im
from mattersim import msglayer, netsim

SECRET = bytes(range(16))


@dataclass
class Net:
    sim: netsim.Simulator
    fabric: dm.Fabric
    ml: dict[int, msglayer.MessageLayer]
    im: dict[int, im.InteractionEngine]

    def session(self, a: int, b: int) -> msglayer.Session:
        p = self.ml[a].establish_session(b)
        self.sim.run_until(self.sim.now + 2 * netsim.NS_PER_S)
        return p.result()


def make_net(*, loss: float = 0.0, hops: int = 1, technology: str = "thread", seed: int = 0,
             link_retries: int = 3, transport: str = netsim.UNRELIABLE,
             mrp: msglayer.MrpConfig = msglayer.MrpConfig(), config: im.ImConfig = im.ImConfig(),
             preamble: bool = True, extra_nodes: int = 0, processing_delay_ns=0,
             engines: bool = True) -> Net:
    ids = [1, 2] + [3 + i for i in range(extra_nodes)]
    sub = netsim.Subnet("s0", technology, ids, default_hops=hops, loss=loss,
                        link_retries=link_retries, include_phy_preamble=preamble)
    sim = netsim.Simulator(netsim.Topology([sub]), seed=seed, processing_delay_ns=processing_delay_ns)
    nodes = [dm.Node(1, [dm.Endpoint(1, [])])]
    for n in ids[1:]:
        nodes.append(dm.Node(n, [dm.Endpoint(1, [dm.build_onoff_cluster(),
                                                 dm.build_temperature_cluster(history_len=40)])]))
    fabric = dm.Fabric(1, SECRET, nodes)
    mls, ims = {}, {}
    for n in ids:
        mls[n] = msglayer.MessageLayer(sim, n, SECRET, mrp, transport, 1)
        if engines:
            ims[n] = im.InteractionEngine(mls[n], fabric, n, config)
    return Net(sim, fabric, mls, ims)


@pytest.fixture
def net() -> Net:
    return make_net()


def pytest_terminal_summary(terminalreporter):
    import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
