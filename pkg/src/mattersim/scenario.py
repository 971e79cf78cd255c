"""Scenario files: schema validation, stack assembly and the workload driver."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath
from typing import Any

import jsonschema

from . import datamodel as dm
from . import interaction as im
from . import msglayer, netsim
from .datamodel import ElementKind, Path
from .netsim import NS_PER_MS, NS_PER_S, NS_PER_US

COMMISSIONING_LIMIT_S = 60.0
DRAIN_S = 60.0


class ScenarioError(Exception):
    """The scenario file is unreadable, fails the schema, or is inconsistent."""


def schema() -> dict:
    return json.loads(resources.files("mattersim").joinpath("scenario.schema.json").read_text())


def bundled(name: str) -> FsPath:
    """Path of a scenario shipped with the package, e.g. ``lighting_1hop.json``."""
    p = resources.files("mattersim").joinpath("scenarios", name)
    if not p.is_file():
        raise ScenarioError(f"no bundled scenario {name!r}")
    return FsPath(str(p))


def validate(data: Any) -> dict:
    try:
        jsonschema.validate(data, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{where}: {exc.message}") from None
    for sc in data["topology"]["subnets"]:
        if sc["technology"] != "thread" and (sc.get("default_hops", 1) > 1 or sc.get("hops")):
            raise ScenarioError(f"subnet {sc['name']}: only thread subnets can be multihop")
    return data


def load(path: str | FsPath) -> dict:
    try:
        data = json.loads(FsPath(path).read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON: {exc}") from None
    return validate(data)


@dataclass
class Device:
    node_id: int
    node: dm.Node | None
    ml: msglayer.MessageLayer
    im: im.InteractionEngine


@dataclass
class Stack:
    sim: netsim.Simulator
    fabric: dm.Fabric
    devices: dict[int, Device]


def build_fabric(section: dict) -> dm.Fabric:
    nodes = []
    for n in section["nodes"]:
        eps = [dm.Endpoint(e["id"], [dm.CLUSTER_BUILDERS[c]() for c in e["clusters"]])
               for e in n["endpoints"]]
        nodes.append(dm.Node(n["id"], eps))
    try:
        fabric = dm.Fabric(section["id"], bytes.fromhex(section["shared_secret"]), nodes)
        for g in section.get("groups", []):
            for node_id, ep in g["members"]:
                fabric.add_group_member(g["id"], node_id, ep)
    except ValueError as exc:
        raise ScenarioError(f"fabric: {exc}") from None
    return fabric


def build(data: dict, seed: int | None = None) -> Stack:
    try:
        topo = netsim.build_topology(data["topology"])
    except (netsim.NetSimError, ValueError) as exc:
        raise ScenarioError(f"topology: {exc}") from None
    fabric = build_fabric(data["fabric"])
    seed = data.get("seed", 0) if seed is None else seed
    delay = round(data.get("processing_delay_us", 0) * NS_PER_US)
    sim = netsim.Simulator(topo, seed=seed, processing_delay_ns=delay)
    mrp = msglayer.MrpConfig(**data.get("mrp", {}))
    ic = data.get("interaction", {})
    try:
        pad = {im.Opcode[k.upper()]: v for k, v in ic.get("pad_to", {}).items()}
    except KeyError as exc:
        raise ScenarioError(f"interaction.pad_to: unknown opcode {exc}") from None
    config = im.ImConfig(transaction_timeout_s=ic.get("transaction_timeout_s", 30.0),
                         max_chunk_bytes=ic.get("max_chunk_bytes"), pad_to=pad)
    transport = data.get("transport", netsim.UNRELIABLE)
    devices = {}
    in_topology = set(topo.nodes)
    for node_id, node in fabric.nodes.items():
        # fabric members outside the topology exist but cannot be reached
        if node_id not in in_topology:
            continue
        ml = msglayer.MessageLayer(sim, node_id, fabric.shared_secret, mrp, transport, fabric.id)
        devices[node_id] = Device(node_id, node, ml, im.InteractionEngine(ml, fabric, node_id, config))
    return Stack(sim, fabric, devices)


@dataclass
class RunResult:
    stack: Stack
    handles: list[tuple[str, im.InteractionHandle]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def sim(self) -> netsim.Simulator:
        return self.stack.sim

    @property
    def ok(self) -> bool:
        return not self.failures

    def trace_csv(self) -> str:
        return self.sim.trace_csv()

    def stats_json(self) -> str:
        return self.sim.stats.to_json()


def _peers(fabric: dm.Fabric, op: dict) -> list[int]:
    if "group" in op:
        return sorted({n for n, _ in fabric.groups.get(op["group"], set())})
    return [op["node"]] if "node" in op else []


def _path(op: dict, kind: ElementKind, element: int) -> Path:
    cluster = dm.CLUSTER_NAMES[op["cluster"]]
    if "group" in op:
        return Path(cluster, element, kind, group=op["group"])
    return Path(cluster, element, kind, node=op["node"], endpoint=op.get("endpoint"))


def _start(stack: Stack, op: dict, label: str) -> im.InteractionHandle | None:
    kind = op["op"]
    if kind == "set":
        node = stack.fabric.nodes.get(op["node"])
        cluster = node.cluster(op["endpoint"], dm.CLUSTER_NAMES[op["cluster"]]) if node else None
        if cluster is None:
            raise ScenarioError(f"{label}: no such cluster instance")
        cluster.set(op["attribute"], op["value"])
        return None
    client = stack.devices.get(op.get("client"))
    if client is None:
        raise ScenarioError(f"{label}: client {op.get('client')} is not a reachable fabric node")
    engine = client.im
    if kind == "read":
        if "event" in op:
            return engine.start_read([_path(op, ElementKind.EVENT, op["event"])], label=label)
        return engine.start_read([_path(op, ElementKind.ATTRIBUTE, op.get("attribute", 0))], label=label)
    if kind == "write":
        return engine.start_write([(_path(op, ElementKind.ATTRIBUTE, op.get("attribute", 0)), op["value"])],
                                  label=label)
    if kind == "invoke":
        return engine.start_invoke(_path(op, ElementKind.COMMAND, dm.COMMAND_NAMES[op["command"]]),
                                   op.get("value"), label=label)
    return engine.start_subscribe([_path(op, ElementKind.ATTRIBUTE, op.get("attribute", 0))],
                                  op["min_interval_s"], op["max_interval_s"], label=label)


def commission(stack: Stack, pairs: list[tuple[int, int]]) -> dict[tuple[int, int], str]:
    """Scripted stand-in for commissioning: open a session for every (client, peer) pair.

    Returns the pairs that failed, with the reason.
    """
    failed: dict[tuple[int, int], str] = {}
    pending = []
    for client, peer in pairs:
        dev = stack.devices.get(client)
        if dev is None:
            failed[(client, peer)] = f"node {client} is not reachable"
            continue
        pending.append(((client, peer), dev.ml.establish_session(peer)))
    limit = stack.sim.now + round(COMMISSIONING_LIMIT_S * NS_PER_S)
    while stack.sim.now < limit and not all(p.done for _, p in pending):
        if not stack.sim.step():
            break
    for pair, p in pending:
        if p.failed:
            failed[pair] = str(p.error)
        elif not p.done:
            failed[pair] = "session establishment did not finish"
    return failed


def run(data: dict, seed: int | None = None) -> RunResult:
    stack = build(data, seed)
    result = RunResult(stack)
    workload = data["workload"]
    pairs = []
    for op in workload:
        if op["op"] != "set":
            for peer in _peers(stack.fabric, op):
                if (op.get("client"), peer) not in pairs:
                    pairs.append((op.get("client"), peer))
    commission(stack, pairs)
    t0 = stack.sim.now

    def fire(op: dict, label: str) -> None:
        try:
            h = _start(stack, op, label)
        except (dm.DataModelError, ValueError, TypeError, KeyError, ScenarioError) as exc:
            result.failures.append(f"{label}: {exc}")
            return
        if h is not None:
            result.handles.append((label, h))

    last = 0
    for i, op in enumerate(workload):
        base = op.get("label", f"{op['op']}#{i}")
        for r in range(op.get("repeat", 1)):
            at = op["at_ms"] + r * op.get("every_ms", 0)
            last = max(last, at)
            label = base if op.get("repeat", 1) == 1 else f"{base}.{r}"
            stack.sim.schedule_at(t0 + round(at * NS_PER_MS), fire, op, label)
    if "run_until_s" in data:
        stack.sim.run_until(t0 + round(data["run_until_s"] * NS_PER_S))
    else:
        stack.sim.run_until(t0 + round(last * NS_PER_MS) + round(DRAIN_S * NS_PER_S))
    for label, h in result.handles:
        if h.failed:
            result.failures.append(f"{label}: {h.error}")
        elif not h.done:
            result.failures.append(f"{label}: did not complete")
            stack.sim.stats.interactions.append({
                "client": None, "target": None, "kind": h.kind.value, "label": h.label,
                "start_ns": h.start_ns, "end_ns": None, "status": "incomplete", "error": "",
            })
    return result
