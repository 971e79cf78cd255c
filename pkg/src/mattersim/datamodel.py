"""Element hierarchy: fabric -> node -> endpoint -> cluster -> attribute/event/command.

Cluster, attribute and command identifiers used by the demo clusters are
project-assigned; they borrow a few familiar ZCL numbers but make no claim of
conformance.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Union

UINT16_MAX = 0xFFFF
UINT32_MAX = 0xFFFF_FFFF
UINT64_MAX = 0xFFFF_FFFF_FFFF_FFFF
MAX_BYTES_LEN = 64
MAX_LIST_LEN = 255


class DataModelError(Exception):
    pass


class UsageError(DataModelError):
    """Caller asked for something the data model never supports (e.g. mixed path kinds)."""


class UnknownFabricError(DataModelError):
    pass


class Status(enum.IntEnum):
    SUCCESS = 0x00
    FAILURE = 0x01
    UNSUPPORTED_ENDPOINT = 0x7F
    UNSUPPORTED_COMMAND = 0x81
    UNSUPPORTED_ATTRIBUTE = 0x86
    CONSTRAINT_ERROR = 0x87
    UNSUPPORTED_WRITE = 0x88
    UNSUPPORTED_CLUSTER = 0xC3


class ElementKind(enum.IntEnum):
    ATTRIBUTE = 0
    EVENT = 1
    COMMAND = 2


class Side(enum.Enum):
    CLIENT = "client"
    SERVER = "server"


class AttrType(enum.IntEnum):
    """Value types; the integer doubles as the wire type tag."""

    BOOL = 1
    INT = 2
    UINT = 3
    TEMPERATURE = 4  # int16, 0.01 degC units
    BYTES = 5
    LIST = 6  # list of int16, used for history-style attributes

    def accepts(self, value: Any) -> bool:
        if self is AttrType.BOOL:
            return isinstance(value, bool)
        if isinstance(value, bool):
            return False
        if self is AttrType.INT:
            return isinstance(value, int) and -(2**31) <= value < 2**31
        if self is AttrType.UINT:
            return isinstance(value, int) and 0 <= value <= UINT32_MAX
        if self is AttrType.TEMPERATURE:
            return isinstance(value, int) and -27315 <= value <= 32767
        if self is AttrType.BYTES:
            return isinstance(value, (bytes, bytearray)) and len(value) <= MAX_BYTES_LEN
        if self is AttrType.LIST:
            return (isinstance(value, (list, tuple)) and len(value) <= MAX_LIST_LEN
                    and all(isinstance(v, int) and not isinstance(v, bool)
                            and -(2**15) <= v < 2**15 for v in value))
        return False


@dataclass
class Attribute:
    id: int
    type: AttrType
    value: Any
    readable: bool = True
    writable: bool = False
    nullable: bool = False

    def __post_init__(self):
        if not self.accepts(self.value):
            raise ValueError(f"attribute {self.id}: initial value {self.value!r} is not {self.type.name}")
        if isinstance(self.value, list):
            self.value = tuple(self.value)

    def accepts(self, value: Any) -> bool:
        if value is None:
            return self.nullable
        return self.type.accepts(value)


@dataclass(frozen=True)
class Event:
    id: int
    event_number: int
    timestamp: int  # virtual time, ns
    payload: bytes = b""


class CommandDirection(enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"


@dataclass(frozen=True)
class CommandResponse:
    """A response command produced by a request handler."""

    command_id: int
    payload: bytes = b""


CommandResult = Union[Status, CommandResponse]
CommandHandler = Callable[["ClusterInstance", Any], CommandResult]


@dataclass
class CommandDef:
    id: int
    direction: CommandDirection = CommandDirection.REQUEST
    handler: CommandHandler | None = None


ChangeListener = Callable[["ConcretePath", Any], None]


@dataclass
class ClusterInstance:
    cluster_id: int
    side: Side = Side.SERVER
    attributes: dict[int, Attribute] = field(default_factory=dict)
    commands: dict[int, CommandDef] = field(default_factory=dict)
    event_ids: set[int] = field(default_factory=set)
    event_log: list[Event] = field(default_factory=list)
    clock: Callable[[], int] = field(default=lambda: 0, repr=False)
    # attr id -> hook run after a value change (e.g. to log an event)
    change_hooks: dict[int, Callable[["ClusterInstance", Any], None]] = field(
        default_factory=dict, repr=False)
    _listener: Callable[["ClusterInstance", int, Any], None] | None = field(
        default=None, repr=False)

    def __post_init__(self):
        if self.side is Side.CLIENT and self.attributes:
            raise ValueError("client cluster instances hold no attribute storage")

    def get(self, attr_id: int) -> Any:
        return self.attributes[attr_id].value

    def set(self, attr_id: int, value: Any) -> None:
        """Local (server-internal) update; bypasses the writable flag but not the type."""
        attr = self.attributes[attr_id]
        if not attr.accepts(value):
            raise TypeError(f"attribute {attr_id}: {value!r} is not {attr.type.name}")
        if isinstance(value, list):
            value = tuple(value)
        changed = attr.value != value
        attr.value = value
        if not changed:
            return
        hook = self.change_hooks.get(attr_id)
        if hook is not None:
            hook(self, value)
        if self._listener is not None:
            self._listener(self, attr_id, value)

    def emit_event(self, event_id: int, payload: bytes = b"") -> Event:
        if event_id not in self.event_ids:
            raise KeyError(f"cluster {self.cluster_id:#x} defines no event {event_id}")
        number = self.event_log[-1].event_number + 1 if self.event_log else 1
        ev = Event(event_id, number, self.clock(), bytes(payload))
        self.event_log.append(ev)
        return ev


@dataclass
class Endpoint:
    id: int
    clusters: list[ClusterInstance] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.id <= UINT16_MAX:
            raise ValueError("EndpointId is 16-bit")
        seen = set()
        for c in self.clusters:
            if c.side is Side.SERVER:
                if c.cluster_id in seen:
                    raise ValueError(f"endpoint {self.id}: duplicate server cluster {c.cluster_id:#x}")
                seen.add(c.cluster_id)

    def server(self, cluster_id: int) -> ClusterInstance | None:
        for c in self.clusters:
            if c.cluster_id == cluster_id and c.side is Side.SERVER:
                return c
        return None

    def add(self, cluster: ClusterInstance) -> ClusterInstance:
        if cluster.side is Side.SERVER and self.server(cluster.cluster_id) is not None:
            raise ValueError(f"endpoint {self.id}: duplicate server cluster {cluster.cluster_id:#x}")
        self.clusters.append(cluster)
        return cluster


class Node:
    def __init__(self, node_id: int, endpoints: list[Endpoint]):
        if not 0 <= node_id <= UINT64_MAX:
            raise ValueError("NodeId is 64-bit")
        if not endpoints:
            raise ValueError("a node needs at least one endpoint")
        ids = [e.id for e in endpoints]
        if len(set(ids)) != len(ids):
            raise ValueError(f"node {node_id}: duplicate endpoint ids")
        self.id = node_id
        self.endpoints = sorted(endpoints, key=lambda e: e.id)
        self._listeners: list[ChangeListener] = []
        self._clock: Callable[[], int] = lambda: 0
        for ep in self.endpoints:
            for c in ep.clusters:
                self._bind(ep, c)

    def _bind(self, ep: Endpoint, cluster: ClusterInstance) -> None:
        def notify(c: ClusterInstance, attr_id: int, value: Any, ep_id=ep.id) -> None:
            cp = ConcretePath(self.id, ep_id, c.cluster_id, ElementKind.ATTRIBUTE, attr_id)
            for fn in list(self._listeners):
                fn(cp, value)

        cluster._listener = notify
        cluster.clock = lambda: self._clock()

    def set_clock(self, clock: Callable[[], int]) -> None:
        self._clock = clock

    def add_listener(self, fn: ChangeListener) -> None:
        self._listeners.append(fn)

    def remove_listener(self, fn: ChangeListener) -> None:
        self._listeners.remove(fn)

    def endpoint(self, endpoint_id: int) -> Endpoint | None:
        for ep in self.endpoints:
            if ep.id == endpoint_id:
                return ep
        return None

    def cluster(self, endpoint_id: int, cluster_id: int) -> ClusterInstance | None:
        ep = self.endpoint(endpoint_id)
        return ep.server(cluster_id) if ep else None

    def __repr__(self):
        return f"Node({self.id}, endpoints={[e.id for e in self.endpoints]})"


class Fabric:
    """Security domain: member nodes, a pre-shared 16-byte secret and the group table."""

    def __init__(self, fabric_id: int, shared_secret: bytes,
                 nodes: list[Node] | None = None,
                 groups: dict[int, set[tuple[int, int]]] | None = None):
        if len(shared_secret) != 16:
            raise ValueError("shared_secret must be exactly 16 bytes")
        self.id = fabric_id
        self.shared_secret = bytes(shared_secret)
        self.nodes: dict[int, Node] = {}
        self.groups: dict[int, set[tuple[int, int]]] = {}
        for n in nodes or []:
            self.add_node(n)
        for gid, members in (groups or {}).items():
            for node_id, ep_id in members:
                self.add_group_member(gid, node_id, ep_id)

    @property
    def members(self) -> set[int]:
        return set(self.nodes)

    def add_node(self, node: Node) -> None:
        if node.id in self.nodes:
            raise ValueError(f"node {node.id} already in fabric {self.id}")
        self.nodes[node.id] = node

    def add_group_member(self, group_id: int, node_id: int, endpoint_id: int) -> None:
        if not 0 <= group_id <= UINT64_MAX:
            raise ValueError("GroupId is 64-bit")
        if node_id not in self.nodes:
            raise ValueError(f"group {group_id}: node {node_id} is not a fabric member")
        self.groups.setdefault(group_id, set()).add((node_id, endpoint_id))


# -- paths -----------------------------------------------------------------

class ConcretePath(NamedTuple):
    node: int
    endpoint: int
    cluster: int
    kind: ElementKind
    element: int


@dataclass(frozen=True)
class Path:
    """Addresses an element on a node (optionally wildcard endpoint) or on a group.

    Node and group ids live in separate planes: exactly one of ``node`` and
    ``group`` is set. ``endpoint=None`` on a node target is the wildcard.
    """

    cluster: int
    element: int
    kind: ElementKind = ElementKind.ATTRIBUTE
    node: int | None = None
    endpoint: int | None = None
    group: int | None = None

    def __post_init__(self):
        if (self.node is None) == (self.group is None):
            raise ValueError("a path targets exactly one of node or group")
        if self.group is not None and self.endpoint is not None:
            raise ValueError("group paths carry no endpoint")

    @property
    def is_group(self) -> bool:
        return self.group is not None

    @property
    def is_wildcard(self) -> bool:
        return self.node is not None and self.endpoint is None

    @classmethod
    def concrete(cls, cp: ConcretePath) -> "Path":
        return cls(cp.cluster, cp.element, cp.kind, node=cp.node, endpoint=cp.endpoint)


def resolve_path(fabric: Fabric, path: Path, local_node: int | None = None) -> list[ConcretePath]:
    """Expand a path to concrete paths, ordered by (node, endpoint).

    ``local_node`` restricts group expansion to a single node, which is how a
    server handles a group-addressed request it received.
    """
    if not isinstance(fabric, Fabric):
        raise UnknownFabricError(f"not a fabric: {fabric!r}")
    if path.is_group:
        members = fabric.groups.get(path.group, set())
        return [ConcretePath(n, e, path.cluster, path.kind, path.element)
                for n, e in sorted(members)
                if local_node is None or n == local_node]
    if path.node not in fabric.nodes:
        raise UnknownFabricError(f"node {path.node} is not a member of fabric {fabric.id}")
    if path.endpoint is not None:
        return [ConcretePath(path.node, path.endpoint, path.cluster, path.kind, path.element)]
    node = fabric.nodes[path.node]
    return [ConcretePath(node.id, ep.id, path.cluster, path.kind, path.element)
            for ep in node.endpoints if ep.server(path.cluster) is not None]


def _lookup(fabric: Fabric, cp: ConcretePath) -> tuple[ClusterInstance | None, Status]:
    node = fabric.nodes.get(cp.node)
    ep = node.endpoint(cp.endpoint) if node else None
    if ep is None:
        return None, Status.UNSUPPORTED_ENDPOINT
    cluster = ep.server(cp.cluster)
    if cluster is None:
        return None, Status.UNSUPPORTED_CLUSTER
    return cluster, Status.SUCCESS


def _require_kind(path: Path, kind: ElementKind) -> None:
    if path.kind is not kind:
        raise UsageError(f"expected a {kind.name.lower()} path, got {path.kind.name.lower()}")


def read_concrete(fabric: Fabric, cp: ConcretePath) -> Any:
    cluster, st = _lookup(fabric, cp)
    if cluster is None:
        return st
    attr = cluster.attributes.get(cp.element)
    if attr is None:
        return Status.UNSUPPORTED_ATTRIBUTE
    if not attr.readable:
        return Status.FAILURE
    return attr.value


def read_attribute(fabric: Fabric, path: Path, local_node: int | None = None
                   ) -> list[tuple[ConcretePath, Any]]:
    _require_kind(path, ElementKind.ATTRIBUTE)
    if path.is_group:
        raise UsageError("group targets are valid for write and invoke only")
    return [(cp, read_concrete(fabric, cp)) for cp in resolve_path(fabric, path, local_node)]


def read_events(fabric: Fabric, path: Path, min_event_number: int = 0
                ) -> list[tuple[ConcretePath, Any]]:
    """Events with ``event_number >= min_event_number`` for every resolved path."""
    _require_kind(path, ElementKind.EVENT)
    if path.is_group:
        raise UsageError("group targets are valid for write and invoke only")
    out = []
    for cp in resolve_path(fabric, path):
        cluster, st = _lookup(fabric, cp)
        if cluster is None:
            out.append((cp, st))
        elif cp.element not in cluster.event_ids:
            out.append((cp, Status.FAILURE))
        else:
            out.append((cp, [e for e in cluster.event_log
                             if e.id == cp.element and e.event_number >= min_event_number]))
    return out


def write_concrete(fabric: Fabric, cp: ConcretePath, value: Any) -> Status:
    cluster, st = _lookup(fabric, cp)
    if cluster is None:
        return st
    attr = cluster.attributes.get(cp.element)
    if attr is None:
        return Status.UNSUPPORTED_ATTRIBUTE
    if not attr.writable:
        return Status.UNSUPPORTED_WRITE
    if not attr.accepts(value):
        return Status.CONSTRAINT_ERROR
    cluster.set(cp.element, value)
    return Status.SUCCESS


def write_attribute(fabric: Fabric, path: Path, value: Any, local_node: int | None = None
                    ) -> list[tuple[ConcretePath, Status]]:
    _require_kind(path, ElementKind.ATTRIBUTE)
    return [(cp, write_concrete(fabric, cp, value))
            for cp in resolve_path(fabric, path, local_node)]


def invoke_concrete(fabric: Fabric, cp: ConcretePath, args: Any = None) -> CommandResult:
    cluster, st = _lookup(fabric, cp)
    if cluster is None:
        return st
    cmd = cluster.commands.get(cp.element)
    if cmd is None or cmd.direction is not CommandDirection.REQUEST or cmd.handler is None:
        return Status.UNSUPPORTED_COMMAND
    return cmd.handler(cluster, args)


def invoke_command(fabric: Fabric, path: Path, args: Any = None, local_node: int | None = None
                   ) -> list[tuple[ConcretePath, CommandResult]]:
    _require_kind(path, ElementKind.COMMAND)
    return [(cp, invoke_concrete(fabric, cp, args))
            for cp in resolve_path(fabric, path, local_node)]


# -- demo clusters ---------------------------------------------------------

ONOFF_CLUSTER = 0x0006
ATTR_ONOFF = 0x0000
CMD_OFF, CMD_ON, CMD_TOGGLE = 0x00, 0x01, 0x02
EVENT_STATE_CHANGE = 0x00

TEMPERATURE_CLUSTER = 0x0402
ATTR_MEASURED_VALUE = 0x0000
ATTR_MIN_MEASURED = 0x0001
ATTR_MAX_MEASURED = 0x0002
ATTR_HISTORY = 0x0010  # list attribute, exercises chunking

ATTR_CLUSTER_REVISION = 0xFFFD


def build_onoff_cluster(side: Side = Side.SERVER) -> ClusterInstance:
    if side is Side.CLIENT:
        return ClusterInstance(ONOFF_CLUSTER, Side.CLIENT)
    c = ClusterInstance(
        ONOFF_CLUSTER,
        attributes={
            ATTR_ONOFF: Attribute(ATTR_ONOFF, AttrType.BOOL, False, writable=True),
            ATTR_CLUSTER_REVISION: Attribute(ATTR_CLUSTER_REVISION, AttrType.UINT, 4),
        },
        event_ids={EVENT_STATE_CHANGE},
        change_hooks={ATTR_ONOFF: lambda cl, v: cl.emit_event(EVENT_STATE_CHANGE, bytes([int(v)]))},
    )
    c.commands = {
        CMD_OFF: CommandDef(CMD_OFF, handler=lambda cl, _: _toggle_to(cl, False)),
        CMD_ON: CommandDef(CMD_ON, handler=lambda cl, _: _toggle_to(cl, True)),
        CMD_TOGGLE: CommandDef(CMD_TOGGLE, handler=lambda cl, _: _toggle_to(cl, not cl.get(ATTR_ONOFF))),
    }
    return c


def _toggle_to(cluster: ClusterInstance, value: bool) -> Status:
    cluster.set(ATTR_ONOFF, value)
    return Status.SUCCESS


def build_temperature_cluster(initial: int | None = 2150, history_len: int = 0) -> ClusterInstance:
    """Temperature measurement server; values in 0.01 degC units.

    ``history_len`` > 0 adds a read-only list attribute of past samples.
    """
    attrs = {
        ATTR_MEASURED_VALUE: Attribute(ATTR_MEASURED_VALUE, AttrType.TEMPERATURE, initial,
                                       nullable=True),
        ATTR_MIN_MEASURED: Attribute(ATTR_MIN_MEASURED, AttrType.TEMPERATURE, -4000),
        ATTR_MAX_MEASURED: Attribute(ATTR_MAX_MEASURED, AttrType.TEMPERATURE, 8500),
        ATTR_CLUSTER_REVISION: Attribute(ATTR_CLUSTER_REVISION, AttrType.UINT, 4),
    }
    if history_len:
        samples = tuple(2000 + (i * 7) % 300 for i in range(history_len))
        attrs[ATTR_HISTORY] = Attribute(ATTR_HISTORY, AttrType.LIST, samples)
    return ClusterInstance(TEMPERATURE_CLUSTER, attributes=attrs)


CLUSTER_BUILDERS: dict[str, Callable[[], ClusterInstance]] = {
    "onoff": build_onoff_cluster,
    "temperature": build_temperature_cluster,
    "temperature_history": lambda: build_temperature_cluster(history_len=40),
}

CLUSTER_NAMES = {"onoff": ONOFF_CLUSTER, "temperature": TEMPERATURE_CLUSTER,
                 "temperature_history": TEMPERATURE_CLUSTER}
COMMAND_NAMES = {"off": CMD_OFF, "on": CMD_ON, "toggle": CMD_TOGGLE}
