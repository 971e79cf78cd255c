import pytest
from hypothesis import given
from hypothesis import strategies as st

from mattersim import datamodel as dm
from mattersim.datamodel import ConcretePath, ElementKind, Path, Status

SECRET = bytes(16)
ONOFF = dm.ONOFF_CLUSTER


def light(node_id, endpoints=(1,)):
    return dm.Node(node_id, [dm.Endpoint(e, [dm.build_onoff_cluster()]) for e in endpoints])


def fabric_with(*nodes, groups=None):
    return dm.Fabric(1, SECRET, list(nodes), groups)


def cmd(node, ep, command, **kw):
    return Path(ONOFF, command, ElementKind.COMMAND, node=node, endpoint=ep, **kw)


def onoff(node, ep=1):
    return Path(ONOFF, dm.ATTR_ONOFF, node=node, endpoint=ep)


def test_onoff_initially_false():
    c = dm.build_onoff_cluster()
    assert c.get(dm.ATTR_ONOFF) is False
    assert set(c.commands) == {dm.CMD_OFF, dm.CMD_ON, dm.CMD_TOGGLE}
    assert dm.EVENT_STATE_CHANGE in c.event_ids


def test_invoke_on_then_read():
    f = fabric_with(light(5))
    assert dm.invoke_command(f, cmd(5, 1, dm.CMD_ON)) == [(ConcretePath(5, 1, ONOFF, ElementKind.COMMAND, 1),
                                                          Status.SUCCESS)]
    assert dm.read_attribute(f, onoff(5)) == [(ConcretePath(5, 1, ONOFF, ElementKind.ATTRIBUTE, 0), True)]


def test_toggle_twice_is_identity():
    f = fabric_with(light(5))
    dm.invoke_command(f, cmd(5, 1, dm.CMD_TOGGLE))
    dm.invoke_command(f, cmd(5, 1, dm.CMD_TOGGLE))
    assert dm.read_attribute(f, onoff(5))[0][1] is False


def test_read_missing_endpoint_yields_status():
    f = fabric_with(light(5))
    assert dm.read_attribute(f, onoff(5, 9))[0][1] is Status.UNSUPPORTED_ENDPOINT


def test_read_missing_cluster_and_attribute():
    f = fabric_with(light(5))
    assert dm.read_attribute(f, Path(0x0402, 0, node=5, endpoint=1))[0][1] is Status.UNSUPPORTED_CLUSTER
    assert dm.read_attribute(f, Path(ONOFF, 0x99, node=5, endpoint=1))[0][1] is Status.UNSUPPORTED_ATTRIBUTE


def test_group_read_rejected():
    f = fabric_with(light(5), groups={7: {(5, 1)}})
    with pytest.raises(dm.UsageError):
        dm.read_attribute(f, Path(ONOFF, 0, group=7))


def test_wrong_kind_rejected():
    f = fabric_with(light(5))
    with pytest.raises(dm.UsageError):
        dm.read_attribute(f, cmd(5, 1, dm.CMD_ON))
    with pytest.raises(dm.UsageError):
        dm.invoke_command(f, onoff(5))


def test_write_statuses():
    f = fabric_with(light(5), dm.Node(6, [dm.Endpoint(1, [dm.build_temperature_cluster()])]))
    assert dm.write_attribute(f, onoff(5), True)[0][1] is Status.SUCCESS
    assert dm.read_attribute(f, onoff(5))[0][1] is True
    temp = Path(dm.TEMPERATURE_CLUSTER, dm.ATTR_MEASURED_VALUE, node=6, endpoint=1)
    assert dm.write_attribute(f, temp, 100)[0][1] is Status.UNSUPPORTED_WRITE
    assert dm.write_attribute(f, onoff(5), 3)[0][1] is Status.CONSTRAINT_ERROR
    assert dm.read_attribute(f, onoff(5))[0][1] is True


def test_unknown_command():
    f = fabric_with(light(5))
    assert dm.invoke_command(f, cmd(5, 1, 0x42))[0][1] is Status.UNSUPPORTED_COMMAND


def test_group_invoke_fans_out():
    f = fabric_with(light(5, (1, 2)), light(6), groups={9: {(5, 1), (5, 2), (6, 1)}})
    out = dm.invoke_command(f, Path(ONOFF, dm.CMD_ON, ElementKind.COMMAND, group=9))
    assert [cp[:2] for cp, _ in out] == [(5, 1), (5, 2), (6, 1)]
    assert all(s is Status.SUCCESS for _, s in out)
    assert all(v is True for n, e in [(5, 1), (5, 2), (6, 1)] for _, v in dm.read_attribute(f, onoff(n, e)))


def test_resolve_single_group_and_wildcard():
    f = fabric_with(light(5, (2, 1)), light(6), groups={3: {(6, 1), (5, 1)}})
    assert dm.resolve_path(f, cmd(5, 1, dm.CMD_ON)) == [ConcretePath(5, 1, ONOFF, ElementKind.COMMAND, 1)]
    assert [cp[:2] for cp in dm.resolve_path(f, Path(ONOFF, 1, ElementKind.COMMAND, group=3))] == [(5, 1), (6, 1)]
    assert [cp.endpoint for cp in dm.resolve_path(f, onoff(5, None))] == [1, 2]


def test_resolve_local_node_restricts_group():
    f = fabric_with(light(5), light(6), groups={3: {(6, 1), (5, 1)}})
    assert [cp.node for cp in dm.resolve_path(f, Path(ONOFF, 0, group=3), local_node=6)] == [6]


def test_resolve_unknown_fabric_or_node():
    f = fabric_with(light(5))
    with pytest.raises(dm.UnknownFabricError):
        dm.resolve_path(object(), onoff(5))
    with pytest.raises(dm.UnknownFabricError):
        dm.resolve_path(f, onoff(77))


def test_path_target_is_node_xor_group():
    with pytest.raises(ValueError):
        Path(ONOFF, 0, node=1, group=2)
    with pytest.raises(ValueError):
        Path(ONOFF, 0)
    with pytest.raises(ValueError):
        Path(ONOFF, 0, group=2, endpoint=1)


def test_fabric_invariants():
    with pytest.raises(ValueError):
        dm.Fabric(1, bytes(15))
    f = fabric_with(light(5))
    with pytest.raises(ValueError):
        f.add_group_member(1, 99, 1)
    with pytest.raises(ValueError):
        f.add_node(light(5))
    assert f.members == {5}


def test_node_and_endpoint_invariants():
    with pytest.raises(ValueError):
        dm.Node(1, [])
    with pytest.raises(ValueError):
        dm.Endpoint(1, [dm.build_onoff_cluster(), dm.build_onoff_cluster()])
    with pytest.raises(ValueError):
        dm.Node(1, [dm.Endpoint(1), dm.Endpoint(1)])
    with pytest.raises(ValueError):
        dm.ClusterInstance(ONOFF, dm.Side.CLIENT, {0: dm.Attribute(0, dm.AttrType.BOOL, False)})
    # a client instance next to the server instance is fine
    dm.Endpoint(1, [dm.build_onoff_cluster(), dm.build_onoff_cluster(dm.Side.CLIENT)])


def test_attribute_types():
    assert dm.AttrType.TEMPERATURE.accepts(2150)
    assert not dm.AttrType.TEMPERATURE.accepts(40000)
    assert not dm.AttrType.INT.accepts(True)
    assert dm.AttrType.BYTES.accepts(bytes(64)) and not dm.AttrType.BYTES.accepts(bytes(65))
    assert not dm.AttrType.UINT.accepts(-1)
    with pytest.raises(ValueError):
        dm.Attribute(0, dm.AttrType.BOOL, 1)
    assert dm.Attribute(0, dm.AttrType.INT, None, nullable=True).accepts(None)


def test_state_change_events_are_gapless():
    n = light(5)
    t = [0]
    n.set_clock(lambda: t[0])
    f = fabric_with(n)
    for i in range(5):
        t[0] = i * 10
        dm.invoke_command(f, cmd(5, 1, dm.CMD_TOGGLE))
    dm.invoke_command(f, cmd(5, 1, dm.CMD_ON))  # already on: no change, no event
    log = n.cluster(1, ONOFF).event_log
    assert [e.event_number for e in log] == [1, 2, 3, 4, 5]
    assert [e.timestamp for e in log] == [0, 10, 20, 30, 40]
    events = dm.read_events(f, Path(ONOFF, dm.EVENT_STATE_CHANGE, ElementKind.EVENT, node=5, endpoint=1), 4)
    assert [e.event_number for e in events[0][1]] == [4, 5]


def test_listener_sees_changes_only():
    n = light(5)
    seen = []
    n.add_listener(lambda cp, v: seen.append((cp.endpoint, v)))
    f = fabric_with(n)
    dm.write_attribute(f, onoff(5), True)
    dm.write_attribute(f, onoff(5), True)
    dm.write_attribute(f, onoff(5), False)
    assert seen == [(1, True), (1, False)]


ops = st.lists(st.tuples(st.sampled_from(["write", "on", "off", "toggle"]), st.booleans()), max_size=30)


@given(ops)
def test_read_after_write_matches_reference(seq):
    f = fabric_with(light(5))
    ref = False
    for op, v in seq:
        if op == "write":
            dm.write_attribute(f, onoff(5), v)
            ref = v
        else:
            dm.invoke_command(f, cmd(5, 1, dm.COMMAND_NAMES[op]))
            ref = {"on": True, "off": False, "toggle": not ref}[op]
        assert dm.read_attribute(f, onoff(5))[0][1] is ref


@given(st.sets(st.integers(0, 20), min_size=1, max_size=8), st.integers(0, 2**64 - 1))
def test_resolution_is_deterministic_and_sorted(eps, gid):
    f = fabric_with(light(5, sorted(eps, reverse=True)))
    for e in eps:
        f.add_group_member(gid, 5, e)
    a = dm.resolve_path(f, onoff(5, None))
    assert a == dm.resolve_path(f, onoff(5, None))
    assert [cp.endpoint for cp in a] == sorted(eps)
    assert [cp.endpoint for cp in dm.resolve_path(f, Path(ONOFF, 0, group=gid))] == sorted(eps)
