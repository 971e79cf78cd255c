"""Interaction Model: actions, chunking, and the Read/Write/Invoke/Subscribe state machines.

Action wire format (little-endian)::

    opcode(1) path_count(1) path(19) * path_count payload_len(2) payload [padding]

A path is ``flags(1) target(8) endpoint(2) cluster(4) element(4)`` where
``flags`` holds the element kind (bits 0-1), the group-target bit (2) and the
wildcard-endpoint bit (3). Bytes after the declared payload are padding and
are ignored by the decoder.
"""

from __future__ import annotations

import enum
import itertools
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from . import datamodel as dm
from . import encap, msglayer, netsim
from .datamodel import ConcretePath, ElementKind, Path, Status
from .netsim import NS_PER_S, Pending

log = logging.getLogger(__name__)

__all__ = [
    "Path", "ConcretePath", "Opcode", "Action", "Chunk", "chunk_payload", "reassemble",
    "InteractionEngine", "ImConfig", "Subscription",
]


class InteractionError(Exception):
    pass


class InteractionTimeout(InteractionError):
    pass


class InteractionFailed(InteractionError):
    pass


class ReassemblyIncomplete(InteractionError):
    pass


class SubscriptionRejected(InteractionError):
    pass


class DecodeError(InteractionError):
    pass


class Opcode(enum.IntEnum):
    STATUS_RESPONSE = 0x01
    READ_REQUEST = 0x02
    SUBSCRIBE_REQUEST = 0x03
    SUBSCRIBE_RESPONSE = 0x04
    REPORT_DATA = 0x05
    WRITE_REQUEST = 0x06
    WRITE_RESPONSE = 0x07
    INVOKE_REQUEST = 0x08
    INVOKE_RESPONSE = 0x09


class ActionKind(enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"
    REPORT = "report"


ACTION_KINDS = {
    Opcode.READ_REQUEST: ActionKind.REQUEST,
    Opcode.WRITE_REQUEST: ActionKind.REQUEST,
    Opcode.INVOKE_REQUEST: ActionKind.REQUEST,
    Opcode.SUBSCRIBE_REQUEST: ActionKind.REQUEST,
    Opcode.WRITE_RESPONSE: ActionKind.RESPONSE,
    Opcode.INVOKE_RESPONSE: ActionKind.RESPONSE,
    Opcode.SUBSCRIBE_RESPONSE: ActionKind.RESPONSE,
    Opcode.STATUS_RESPONSE: ActionKind.RESPONSE,
    Opcode.REPORT_DATA: ActionKind.REPORT,
}


class InteractionKind(enum.Enum):
    READ = "Read"
    WRITE = "Write"
    INVOKE = "Invoke"
    SUBSCRIBE = "Subscribe"
    REPORT = "Report"


# -- path & value encoding -------------------------------------------------

_PATH = struct.Struct("<BQHII")
PATH_LEN = _PATH.size
_GROUP_BIT = 0x04
_WILDCARD_BIT = 0x08


def encode_path(path: Path | ConcretePath) -> bytes:
    if isinstance(path, ConcretePath):
        path = Path.concrete(path)
    flags = int(path.kind)
    if path.is_group:
        flags |= _GROUP_BIT
        target, ep = path.group, 0
    else:
        target = path.node
        if path.endpoint is None:
            flags |= _WILDCARD_BIT
            ep = 0
        else:
            ep = path.endpoint
    return _PATH.pack(flags, target, ep, path.cluster, path.element)


def decode_path(data: bytes, offset: int = 0) -> Path:
    flags, target, ep, cluster, element = _PATH.unpack_from(data, offset)
    kind = ElementKind(flags & 0x03)
    if flags & _GROUP_BIT:
        return Path(cluster, element, kind, group=target)
    return Path(cluster, element, kind, node=target,
                endpoint=None if flags & _WILDCARD_BIT else ep)


TAG_NULL = 0
TAG_EVENTS = 7


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated action payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def u8(self) -> int:
        return self.take(1)[0]


def encode_value(value: Any, type_: dm.AttrType | None = None) -> bytes:
    if value is None:
        return bytes([TAG_NULL])
    if type_ is None:
        if isinstance(value, bool):
            type_ = dm.AttrType.BOOL
        elif isinstance(value, int):
            type_ = dm.AttrType.INT if -(2**31) <= value < 2**31 else dm.AttrType.UINT
        elif isinstance(value, (bytes, bytearray)):
            type_ = dm.AttrType.BYTES
        elif isinstance(value, (list, tuple)) and all(isinstance(v, dm.Event) for v in value) and value:
            return _encode_events(value)
        elif isinstance(value, (list, tuple)):
            type_ = dm.AttrType.LIST
        else:
            raise TypeError(f"cannot encode {value!r}")
    tag = bytes([int(type_)])
    if type_ is dm.AttrType.BOOL:
        return tag + bytes([int(value)])
    if type_ is dm.AttrType.INT:
        return tag + struct.pack("<i", value)
    if type_ is dm.AttrType.UINT:
        return tag + struct.pack("<I", value)
    if type_ is dm.AttrType.TEMPERATURE:
        return tag + struct.pack("<h", value)
    if type_ is dm.AttrType.BYTES:
        return tag + bytes([len(value)]) + bytes(value)
    if type_ is dm.AttrType.LIST:
        return tag + bytes([len(value)]) + struct.pack(f"<{len(value)}h", *value)
    raise TypeError(f"unsupported type {type_!r}")


def _encode_events(events: Sequence[dm.Event]) -> bytes:
    out = bytearray([TAG_EVENTS, len(events)])
    for e in events:
        out += struct.pack("<IQQB", e.id, e.event_number, e.timestamp, len(e.payload)) + e.payload
    return bytes(out)


def decode_value(r: _Reader) -> Any:
    tag = r.u8()
    if tag == TAG_NULL:
        return None
    if tag == TAG_EVENTS:
        out = []
        for _ in range(r.u8()):
            eid, num, ts, n = r.unpack("<IQQB")
            out.append(dm.Event(eid, num, ts, r.take(n)))
        return out
    try:
        t = dm.AttrType(tag)
    except ValueError as exc:
        raise DecodeError(f"unknown value tag {tag}") from exc
    if t is dm.AttrType.BOOL:
        return bool(r.u8())
    if t is dm.AttrType.INT:
        return r.unpack("<i")[0]
    if t is dm.AttrType.UINT:
        return r.unpack("<I")[0]
    if t is dm.AttrType.TEMPERATURE:
        return r.unpack("<h")[0]
    if t is dm.AttrType.BYTES:
        return r.take(r.u8())
    n = r.u8()
    return tuple(r.unpack(f"<{n}h"))


# -- actions ---------------------------------------------------------------

@dataclass
class Action:
    opcode: Opcode
    paths: list[Path] = field(default_factory=list)
    payload: bytes = b""
    pad_to: int | None = None

    @property
    def kind(self) -> ActionKind:
        return ACTION_KINDS[self.opcode]

    def encode(self) -> bytes:
        if len(self.paths) > 255:
            raise ValueError("at most 255 paths per action")
        if len(self.payload) > 0xFFFF:
            raise ValueError("payload too long")
        out = bytes([int(self.opcode), len(self.paths)])
        out += b"".join(encode_path(p) for p in self.paths)
        out += struct.pack("<H", len(self.payload)) + self.payload
        if self.pad_to is not None and len(out) < self.pad_to:
            out += bytes(self.pad_to - len(out))
        return out

    @classmethod
    def decode(cls, data: bytes) -> "Action":
        r = _Reader(bytes(data))
        try:
            opcode = Opcode(r.u8())
        except ValueError as exc:
            raise DecodeError(f"unknown opcode {data[0]:#x}") from exc
        n = r.u8()
        paths = [decode_path(r.take(PATH_LEN)) for _ in range(n)]
        (plen,) = r.unpack("<H")
        return cls(opcode, paths, r.take(plen))


def _concrete(p: Path) -> ConcretePath:
    return ConcretePath(p.node, p.endpoint, p.cluster, p.kind, p.element)


def read_request(paths: Sequence[Path]) -> Action:
    return Action(Opcode.READ_REQUEST, list(paths))


def report_data(subscription_id: int, entries: Sequence[tuple[ConcretePath, Any]],
                types: dict[ConcretePath, dm.AttrType] | None = None) -> Action:
    types = types or {}
    body = bytearray(struct.pack("<I", subscription_id))
    for cp, v in entries:
        if isinstance(v, Status):
            body.append(int(v))
        else:
            body.append(int(Status.SUCCESS))
            body += encode_value(v, types.get(cp))
    return Action(Opcode.REPORT_DATA, [Path.concrete(cp) for cp, _ in entries], bytes(body))


def parse_report(action: Action) -> tuple[int, list[tuple[ConcretePath, Any]]]:
    r = _Reader(action.payload)
    (sub_id,) = r.unpack("<I")
    out = []
    for p in action.paths:
        st = Status(r.u8())
        out.append((_concrete(p), decode_value(r) if st is Status.SUCCESS else st))
    return sub_id, out


def write_request(assignments: Sequence[tuple[Path, Any]]) -> Action:
    return Action(Opcode.WRITE_REQUEST, [p for p, _ in assignments],
                  b"".join(encode_value(v) for _, v in assignments))


def parse_write_request(action: Action) -> list[tuple[Path, Any]]:
    r = _Reader(action.payload)
    return [(p, decode_value(r)) for p in action.paths]


def status_list(opcode: Opcode, entries: Sequence[tuple[ConcretePath, Status]]) -> Action:
    return Action(opcode, [Path.concrete(cp) for cp, _ in entries],
                  bytes(int(s) for _, s in entries))


def parse_status_list(action: Action) -> list[tuple[ConcretePath, Status]]:
    return [(_concrete(p), Status(b)) for p, b in zip(action.paths, action.payload)]


def invoke_request(path: Path, args: Any = None) -> Action:
    return Action(Opcode.INVOKE_REQUEST, [path], b"" if args is None else encode_value(args))


def parse_invoke_args(action: Action) -> Any:
    return decode_value(_Reader(action.payload)) if action.payload else None


def invoke_response(entries: Sequence[tuple[ConcretePath, dm.CommandResult]]) -> Action:
    body = bytearray()
    for _, res in entries:
        if isinstance(res, dm.CommandResponse):
            body += struct.pack("<BIB", 1, res.command_id, len(res.payload)) + res.payload
        else:
            body += bytes([0, int(res)])
    return Action(Opcode.INVOKE_RESPONSE, [Path.concrete(cp) for cp, _ in entries], bytes(body))


def parse_invoke_response(action: Action) -> list[tuple[ConcretePath, dm.CommandResult]]:
    r = _Reader(action.payload)
    out = []
    for p in action.paths:
        if r.u8() == 1:
            cmd, n = r.unpack("<IB")
            out.append((_concrete(p), dm.CommandResponse(cmd, r.take(n))))
        else:
            out.append((_concrete(p), Status(r.u8())))
    return out


def subscribe_request(paths: Sequence[Path], min_interval_ms: int, max_interval_ms: int) -> Action:
    return Action(Opcode.SUBSCRIBE_REQUEST, list(paths),
                  struct.pack("<II", min_interval_ms, max_interval_ms))


def subscribe_response(subscription_id: int, max_interval_ms: int) -> Action:
    return Action(Opcode.SUBSCRIBE_RESPONSE, [], struct.pack("<II", subscription_id, max_interval_ms))


def status_response(status: Status) -> Action:
    return Action(Opcode.STATUS_RESPONSE, [], bytes([int(status)]))


# -- chunking --------------------------------------------------------------

MIN_CHUNK = 16


@dataclass(frozen=True)
class Chunk:
    index: int
    more_chunks: bool
    data: bytes


def chunk_payload(encoded: bytes, max_chunk_bytes: int) -> list[Chunk]:
    """Split into pieces of exactly ``max_chunk_bytes`` except the last."""
    if max_chunk_bytes < MIN_CHUNK:
        raise ValueError(f"max_chunk_bytes must be >= {MIN_CHUNK}")
    encoded = bytes(encoded)
    pieces = [encoded[i:i + max_chunk_bytes] for i in range(0, len(encoded), max_chunk_bytes)] or [b""]
    last = len(pieces) - 1
    return [Chunk(i, i != last, p) for i, p in enumerate(pieces)]


def reassemble(chunks: Iterable[Chunk]) -> bytes:
    ordered = sorted(chunks, key=lambda c: c.index)
    if not ordered:
        raise ReassemblyIncomplete("no chunks")
    for expect, c in enumerate(ordered):
        if c.index != expect:
            raise ReassemblyIncomplete(f"missing chunk {expect}")
        if c.more_chunks != (expect != len(ordered) - 1):
            raise ReassemblyIncomplete("final chunk not received")
    return b"".join(c.data for c in ordered)


class Reassembler:
    """Accumulates chunks per exchange; chunks arrive in order (stop-and-wait sender)."""

    def __init__(self):
        self._parts: dict[Any, list[Chunk]] = {}

    def add(self, key: Any, data: bytes, more_chunks: bool) -> bytes | None:
        parts = self._parts.setdefault(key, [])
        parts.append(Chunk(len(parts), more_chunks, bytes(data)))
        if more_chunks:
            return None
        del self._parts[key]
        return reassemble(parts)

    def pending(self, key: Any) -> bool:
        return key in self._parts

    def discard(self, key: Any) -> None:
        self._parts.pop(key, None)


# -- engine ----------------------------------------------------------------

@dataclass(frozen=True)
class ImConfig:
    transaction_timeout_s: float = 30.0
    reassembly_timeout_s: float = 30.0
    max_chunk_bytes: int | None = None  # None: derived from the route to the peer
    use_mrp: bool = True
    min_interval_floor_s: float = 1.0
    pad_to: dict[Opcode, int] = field(default_factory=dict)


LIGHTING_PADDING = {Opcode.INVOKE_REQUEST: 25, Opcode.INVOKE_RESPONSE: 33}


@dataclass
class Transaction:
    exchange_id: int
    interaction_kind: InteractionKind
    role: str  # "initiator" | "responder"
    peer: int
    state: str = "idle"
    actions: list[tuple[int, str, Opcode]] = field(default_factory=list)  # (time, dir, opcode)


class InteractionHandle(Pending):
    def __init__(self, kind: InteractionKind, label: str, start_ns: int):
        super().__init__(label)
        self.kind = kind
        self.start_ns = start_ns
        self.end_ns: int | None = None
        self.transactions: list[Transaction] = []

    @property
    def action_trace(self) -> list[tuple[int, str, Opcode]]:
        return [a for t in self.transactions for a in t.actions]

    @property
    def duration_ns(self) -> int | None:
        return None if self.end_ns is None else self.end_ns - self.start_ns


@dataclass
class Subscription:
    id: int
    subscriber: int
    paths: list[Path]
    min_interval: float
    max_interval: float
    last_report_time: int = 0
    active: bool = True
    report_times: list[int] = field(default_factory=list)
    reports: list[tuple[int, list[tuple[ConcretePath, Any]]]] = field(default_factory=list)
    on_report: Callable[["Subscription", list], None] | None = field(default=None, repr=False)
    # publisher-side bookkeeping
    dirty: set[ConcretePath] = field(default_factory=set, repr=False)
    change_timer: netsim.Timer | None = field(default=None, repr=False)
    keepalive_timer: netsim.Timer | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.min_interval <= self.max_interval:
            raise ValueError("need 0 < min_interval <= max_interval")

    def matches(self, cp: ConcretePath) -> bool:
        for p in self.paths:
            if (p.kind is cp.kind and p.cluster == cp.cluster and p.element == cp.element
                    and p.node == cp.node and (p.endpoint is None or p.endpoint == cp.endpoint)):
                return True
        return False


def _s_to_ns(s: float) -> int:
    return round(s * NS_PER_S)


class InteractionEngine:
    """Client and server sides of the Interaction Model for one node."""

    def __init__(self, ml: msglayer.MessageLayer, fabric: dm.Fabric, node_id: int,
                 config: ImConfig = ImConfig()):
        self.ml = ml
        self.sim = ml.sim
        self.fabric = fabric
        self.node_id = node_id
        self.config = config
        ml.on_message = self._on_message
        self._exchange_ids = itertools.count(1)
        self._initiated: dict[tuple[int, int], tuple[Transaction, Callable]] = {}
        self._reasm = Reassembler()
        self._reasm_timers: dict[Any, netsim.Timer] = {}
        self._sub_ids = itertools.count(1)
        self.publications: dict[int, Subscription] = {}
        self.subscriptions: dict[tuple[int, int], Subscription] = {}
        node = fabric.nodes.get(node_id)
        if node is not None:
            node.set_clock(lambda: self.sim.now)
            node.add_listener(self._on_attribute_change)
        self.handles: list[InteractionHandle] = []

    # helpers
    def _next_exchange(self) -> int:
        return next(self._exchange_ids) & 0xFFFF or next(self._exchange_ids) & 0xFFFF

    @property
    def reliable(self) -> bool:
        return self.config.use_mrp and self.ml.mrp_enabled

    def max_chunk_bytes(self, peer: int) -> int:
        if self.config.max_chunk_bytes is not None:
            return self.config.max_chunk_bytes
        limit = netsim.IPV6_MIN_MTU - 40 - 8 - msglayer.HEADER_LEN_ACK - msglayer.MIC_LEN
        for seg in self.sim.topology.route(self.node_id, peer):
            if seg.subnet.technology == "thread":
                limit = min(limit, encap.max_unfragmented_payload(
                    seg.hops > 1, seg.subnet.compression, msglayer.HEADER_LEN_ACK))
        return limit

    def _pad(self, action: Action) -> Action:
        pad = self.config.pad_to.get(action.opcode)
        if pad is not None:
            action.pad_to = pad
        return action

    def _send_action(self, session: msglayer.Session, action: Action, exchange_id: int,
                     initiator: bool, txn: Transaction | None = None, reliable: bool | None = None
                     ) -> Pending:
        """Send an action, chunked stop-and-wait when it exceeds the chunk threshold."""
        reliable = self.reliable if reliable is None else reliable
        encoded = self._pad(action).encode()
        limit = self.max_chunk_bytes(session.peer)
        chunks = chunk_payload(encoded, limit) if len(encoded) > limit else [Chunk(0, False, encoded)]
        done = Pending(f"action {action.opcode.name}")
        if txn is not None:
            txn.actions.append((self.sim.now, "tx", action.opcode))
        self.sim.stats.count(self.node_id, "actions_tx")
        if len(chunks) > 1:
            self.sim.stats.count(self.node_id, "chunked_actions_tx")

        def send_from(i: int) -> None:
            c = chunks[i]
            h = self.ml.send(session, int(action.opcode), c.data, exchange_id=exchange_id,
                             initiator=initiator, reliable=reliable, more_chunks=c.more_chunks)
            if i == len(chunks) - 1:
                h.add_done_callback(lambda hh: done.fail(hh.error) if hh.failed else done.resolve(hh.value))
            elif reliable:
                h.add_done_callback(lambda hh: done.fail(hh.error) if hh.failed else send_from(i + 1))
            else:
                send_from(i + 1)

        send_from(0)
        return done

    # client side
    def _begin(self, kind: InteractionKind, peer: int, label: str, request: Action,
               on_response: Callable[[Transaction, Action, InteractionHandle], None]
               ) -> InteractionHandle:
        handle = InteractionHandle(kind, label, self.sim.now)
        self.handles.append(handle)
        txn = Transaction(self._next_exchange(), kind, "initiator", peer, "awaiting-session")
        handle.transactions.append(txn)
        timeout = self.sim.schedule(_s_to_ns(self.config.transaction_timeout_s), self._on_timeout, txn, handle)
        handle.add_done_callback(lambda h: (timeout.cancel(), self._finish(h, peer)))

        def with_session(p: Pending) -> None:
            if p.failed:
                txn.state = "failed"
                handle.fail(InteractionFailed(f"{label}: no session with node {peer}: {p.error}"))
                return
            if handle.done:
                return
            txn.state = "awaiting-response"
            self._initiated[(peer, txn.exchange_id)] = (txn, lambda t, a: on_response(t, a, handle))
            sent = self._send_action(p.value, request, txn.exchange_id, True, txn)
            sent.add_done_callback(
                lambda s: handle.fail(InteractionFailed(f"{label}: {s.error}")) if s.failed else None)

        try:
            self.ml.establish_session(peer).add_done_callback(with_session)
        except netsim.NoRouteError as exc:
            handle.fail(InteractionFailed(f"{label}: {exc}"))
        return handle

    def _finish(self, handle: InteractionHandle, peer: int) -> None:
        handle.end_ns = self.sim.now
        for t in handle.transactions:
            self._initiated.pop((peer, t.exchange_id), None)
            if t.state not in ("complete",):
                t.state = "failed" if handle.failed else "complete"
        self.sim.stats.interactions.append({
            "client": self.node_id, "target": peer, "kind": handle.kind.value,
            "label": handle.label, "start_ns": handle.start_ns, "end_ns": handle.end_ns,
            "status": "failed" if handle.failed else "complete",
            "error": str(handle.error) if handle.error else "",
        })

    def _on_timeout(self, txn: Transaction, handle: InteractionHandle) -> None:
        txn.state = "timed-out"
        self._reasm.discard((txn.peer, txn.exchange_id, "resp"))
        handle.fail(InteractionTimeout(f"{handle.label}: no response within "
                                       f"{self.config.transaction_timeout_s:g} s"))

    @staticmethod
    def _peer_of(paths: Sequence[Path]) -> int:
        nodes = {p.node for p in paths}
        if None in nodes:
            raise dm.UsageError("group targets are valid for write and invoke only")
        if len(nodes) != 1:
            raise dm.UsageError("all paths of one request must target the same node")
        return nodes.pop()

    def start_read(self, paths: Sequence[Path], *, label: str | None = None) -> InteractionHandle:
        paths = list(paths)
        if not paths:
            raise dm.UsageError("read needs at least one path")
        if any(p.kind is ElementKind.COMMAND for p in paths):
            raise dm.UsageError("read paths must target attributes or events")
        peer = self._peer_of(paths)

        def on_resp(txn, action, handle):
            if action.opcode is not Opcode.REPORT_DATA:
                handle.fail(InteractionFailed(f"unexpected {action.opcode.name}"))
                return
            txn.state = "complete"
            handle.resolve(parse_report(action)[1])

        return self._begin(InteractionKind.READ, peer, label or f"read@{peer}", read_request(paths), on_resp)

    def start_write(self, assignments: Sequence[tuple[Path, Any]], *,
                    label: str | None = None) -> InteractionHandle:
        assignments = list(assignments)
        if not assignments:
            raise dm.UsageError("write needs at least one assignment")
        paths = [p for p, _ in assignments]
        if any(p.kind is not ElementKind.ATTRIBUTE for p in paths):
            raise dm.UsageError("write paths must target attributes")
        if all(p.is_group for p in paths):
            return self._group_send(InteractionKind.WRITE, paths[0].group, write_request(assignments), label)
        peer = self._peer_of(paths)

        def on_resp(txn, action, handle):
            if action.opcode is not Opcode.WRITE_RESPONSE:
                handle.fail(InteractionFailed(f"unexpected {action.opcode.name}"))
                return
            txn.state = "complete"
            handle.resolve(parse_status_list(action))

        return self._begin(InteractionKind.WRITE, peer, label or f"write@{peer}",
                           write_request(assignments), on_resp)

    def start_invoke(self, path: Path, args: Any = None, *, label: str | None = None) -> InteractionHandle:
        if path.kind is not ElementKind.COMMAND:
            raise dm.UsageError("invoke paths must target commands")
        if path.is_group:
            return self._group_send(InteractionKind.INVOKE, path.group, invoke_request(path, args), label)

        def on_resp(txn, action, handle):
            if action.opcode is not Opcode.INVOKE_RESPONSE:
                handle.fail(InteractionFailed(f"unexpected {action.opcode.name}"))
                return
            txn.state = "complete"
            handle.resolve(parse_invoke_response(action))

        return self._begin(InteractionKind.INVOKE, path.node, label or f"invoke@{path.node}",
                           invoke_request(path, args), on_resp)

    def _group_send(self, kind: InteractionKind, group: int, action: Action,
                    label: str | None = None) -> InteractionHandle:
        """Unacknowledged fan-out to every node of the group; completes immediately."""
        handle = InteractionHandle(kind, label or f"{kind.value.lower()}@group{group}", self.sim.now)
        self.handles.append(handle)
        members = sorted({n for n, _ in self.fabric.groups.get(group, set())})
        for peer in members:
            txn = Transaction(self._next_exchange(), kind, "initiator", peer, "fire-and-forget")
            handle.transactions.append(txn)

            def go(p: Pending, txn=txn) -> None:
                if not p.failed:
                    self._send_action(p.value, action, txn.exchange_id, True, txn, reliable=False)

            self.ml.establish_session(peer).add_done_callback(go)
        handle.end_ns = self.sim.now
        handle.resolve(members)
        self.sim.stats.interactions.append({
            "client": self.node_id, "target": f"group:{group}", "kind": kind.value,
            "label": handle.label, "start_ns": handle.start_ns, "end_ns": handle.end_ns,
            "status": "complete", "error": "",
        })
        return handle

    def start_subscribe(self, paths: Sequence[Path], min_interval: float, max_interval: float,
                        on_report: Callable[[Subscription, list], None] | None = None,
                        *, label: str | None = None) -> InteractionHandle:
        """Resolves with the client-side :class:`Subscription` once the publisher accepts."""
        paths = list(paths)
        if not 0 < min_interval <= max_interval:
            raise ValueError("need 0 < min_interval <= max_interval")
        if any(p.kind is ElementKind.COMMAND for p in paths):
            raise dm.UsageError("subscribe paths must target attributes or events")
        peer = self._peer_of(paths)
        req = subscribe_request(paths, round(min_interval * 1000), round(max_interval * 1000))

        def on_resp(txn, action, handle):
            if action.opcode is Opcode.STATUS_RESPONSE:
                handle.fail(SubscriptionRejected(f"publisher refused: {Status(action.payload[0]).name}"))
                return
            if action.opcode is not Opcode.SUBSCRIBE_RESPONSE:
                handle.fail(InteractionFailed(f"unexpected {action.opcode.name}"))
                return
            sub_id, max_ms = struct.unpack("<II", action.payload)
            sub = Subscription(sub_id, self.node_id, paths, min_interval, max_ms / 1000,
                               last_report_time=self.sim.now, on_report=on_report)
            self.subscriptions[(peer, sub_id)] = sub
            txn.state = "complete"
            handle.resolve(sub)

        return self._begin(InteractionKind.SUBSCRIBE, peer, label or f"subscribe@{peer}", req, on_resp)

    # inbound
    def _on_message(self, session: msglayer.Session, hdr: msglayer.MessageHeader, payload: bytes) -> None:
        if hdr.protocol_id != msglayer.PROTOCOL_INTERACTION:
            return
        peer = session.peer
        role = "req" if hdr.initiator else "resp"
        key = (peer, hdr.exchange_id, role)
        if role == "resp" and (peer, hdr.exchange_id) not in self._initiated:
            self.sim.stats.count(self.node_id, "orphan_responses")
            return
        data = self._reasm.add(key, payload, hdr.more_chunks)
        if data is None:
            if key not in self._reasm_timers:
                self._reasm_timers[key] = self.sim.schedule(
                    _s_to_ns(self.config.reassembly_timeout_s), self._reassembly_expired, key)
            return
        timer = self._reasm_timers.pop(key, None)
        if timer is not None:
            timer.cancel()
        try:
            action = Action.decode(data)
        except (DecodeError, ValueError, struct.error):
            self.sim.stats.count(self.node_id, "undecodable_actions")
            if role == "req":
                self._send_action(session, status_response(Status.FAILURE), hdr.exchange_id, False)
            return
        self.sim.stats.count(self.node_id, "actions_rx")
        if role == "resp":
            txn, cb = self._initiated[(peer, hdr.exchange_id)]
            txn.actions.append((self.sim.now, "rx", action.opcode))
            cb(txn, action)
            return
        if action.opcode is Opcode.REPORT_DATA:
            self._on_report(session, hdr.exchange_id, action)
            return
        for out in self.handle_incoming_action(action, peer):
            self._send_action(session, out, hdr.exchange_id, False)

    def _reassembly_expired(self, key) -> None:
        self._reasm_timers.pop(key, None)
        if self._reasm.pending(key):
            self._reasm.discard(key)
            self.sim.stats.count(self.node_id, "reassembly_incomplete")
            peer, exch, role = key
            entry = self._initiated.get((peer, exch))
            if role == "resp" and entry is not None:
                for h in self.handles:
                    if entry[0] in h.transactions:
                        h.fail(ReassemblyIncomplete(f"{h.label}: chunks missing"))

    def handle_incoming_chunk(self, peer: int, exchange_id: int, data: bytes,
                              more_chunks: bool) -> list[Action]:
        """Server entry point below the message layer: buffer chunks, dispatch when whole."""
        whole = self._reasm.add((peer, exchange_id, "req"), data, more_chunks)
        if whole is None:
            return []
        return self.handle_incoming_action(Action.decode(whole), peer)

    def handle_incoming_action(self, action: Action, peer: int | None = None) -> list[Action]:
        """Dispatch one complete request to the data model; returns the actions to send back."""
        try:
            for p in action.paths:
                if not p.is_group and p.node != self.node_id:
                    raise dm.UsageError(f"request for node {p.node} reached node {self.node_id}")
            if action.opcode is Opcode.READ_REQUEST:
                return [self._pad(self._read(action.paths))]
            if action.opcode is Opcode.WRITE_REQUEST:
                group = any(p.is_group for p, _ in parse_write_request(action))
                results = []
                for p, v in parse_write_request(action):
                    results += dm.write_attribute(self.fabric, p, v, local_node=self.node_id)
                return [] if group else [status_list(Opcode.WRITE_RESPONSE, results)]
            if action.opcode is Opcode.INVOKE_REQUEST:
                if len(action.paths) != 1:
                    return [status_response(Status.FAILURE)]
                path = action.paths[0]
                results = dm.invoke_command(self.fabric, path, parse_invoke_args(action),
                                            local_node=self.node_id)
                return [] if path.is_group else [invoke_response(results)]
            if action.opcode is Opcode.SUBSCRIBE_REQUEST:
                return [self._accept_subscription(action, peer)]
            if action.opcode is Opcode.STATUS_RESPONSE:
                return []
        except (dm.DataModelError, DecodeError):
            return [status_response(Status.FAILURE)]
        return [status_response(Status.FAILURE)]

    def _read(self, paths: Sequence[Path], min_event: int = 0) -> Action:
        entries: list[tuple[ConcretePath, Any]] = []
        types: dict[ConcretePath, dm.AttrType] = {}
        for p in paths:
            if p.kind is ElementKind.EVENT:
                entries += dm.read_events(self.fabric, p, min_event)
                continue
            for cp, v in dm.read_attribute(self.fabric, p, local_node=self.node_id):
                entries.append((cp, v))
                cluster = self.fabric.nodes[cp.node].cluster(cp.endpoint, cp.cluster)
                if cluster is not None and cp.element in cluster.attributes:
                    types[cp] = cluster.attributes[cp.element].type
        return report_data(0, entries, types)

    # publisher side
    def _accept_subscription(self, action: Action, peer: int | None) -> Action:
        min_ms, max_ms = struct.unpack("<II", action.payload)
        if min_ms < self.config.min_interval_floor_s * 1000 or min_ms > max_ms:
            return status_response(Status.CONSTRAINT_ERROR)
        for p in action.paths:
            if p.node != self.node_id:
                return status_response(Status.FAILURE)
        sub = Subscription(next(self._sub_ids), peer, list(action.paths), min_ms / 1000, max_ms / 1000,
                           last_report_time=self.sim.now)
        self.publications[sub.id] = sub
        sub.keepalive_timer = self.sim.schedule(_s_to_ns(sub.max_interval), self._emit_report, sub)
        return subscribe_response(sub.id, max_ms)

    def _on_attribute_change(self, cp: ConcretePath, value: Any) -> None:
        for sub in self.publications.values():
            if not sub.active or not sub.matches(cp):
                continue
            sub.dirty.add(cp)
            if sub.change_timer is None:
                # the first change opens a coalescing window of min_interval
                at = max(self.sim.now, sub.last_report_time) + _s_to_ns(sub.min_interval)
                sub.change_timer = self.sim.schedule_at(at, self._emit_report, sub)

    def _emit_report(self, sub: Subscription) -> None:
        if not sub.active:
            return
        for t in (sub.change_timer, sub.keepalive_timer):
            if t is not None:
                t.cancel()
        sub.change_timer = None
        entries: list[tuple[ConcretePath, Any]] = []
        types: dict[ConcretePath, dm.AttrType] = {}
        for cp in sorted(sub.dirty):
            entries.append((cp, dm.read_concrete(self.fabric, cp)))
            cl = self.fabric.nodes[cp.node].cluster(cp.endpoint, cp.cluster)
            if cl is not None and cp.element in cl.attributes:
                types[cp] = cl.attributes[cp.element].type
        sub.dirty.clear()
        sub.last_report_time = self.sim.now
        sub.report_times.append(self.sim.now)
        sub.reports.append((self.sim.now, entries))
        sub.keepalive_timer = self.sim.schedule(_s_to_ns(sub.max_interval), self._emit_report, sub)
        self.sim.stats.count(self.node_id, "reports_tx")
        action = report_data(sub.id, entries, types)

        def on_reply(txn, reply, handle):
            txn.state = "complete"
            handle.resolve(reply.opcode)

        session = self.ml.session_for(sub.subscriber)
        if session is None:
            sub.active = False
            return
        handle = InteractionHandle(InteractionKind.REPORT, f"report#{sub.id}@{sub.subscriber}", self.sim.now)
        txn = Transaction(self._next_exchange(), InteractionKind.REPORT, "initiator", sub.subscriber,
                          "awaiting-response")
        handle.transactions.append(txn)
        self._initiated[(sub.subscriber, txn.exchange_id)] = (txn, lambda t, a: on_reply(t, a, handle))
        timeout = self.sim.schedule(_s_to_ns(self.config.transaction_timeout_s), self._on_timeout, txn, handle)

        def done(h: Pending) -> None:
            timeout.cancel()
            self._initiated.pop((sub.subscriber, txn.exchange_id), None)
            if h.failed:
                sub.active = False
                self.sim.stats.count(self.node_id, "subscriptions_dropped")

        handle.add_done_callback(done)
        sent = self._send_action(session, action, txn.exchange_id, True, txn)
        sent.add_done_callback(lambda s: handle.fail(InteractionFailed(str(s.error))) if s.failed else None)

    def _on_report(self, session: msglayer.Session, exchange_id: int, action: Action) -> None:
        sub_id, entries = parse_report(action)
        sub = self.subscriptions.get((session.peer, sub_id))
        if sub is None:
            self._send_action(session, status_response(Status.FAILURE), exchange_id, False)
            return
        sub.last_report_time = self.sim.now
        sub.report_times.append(self.sim.now)
        sub.reports.append((self.sim.now, entries))
        self.sim.stats.count(self.node_id, "reports_rx")
        if sub.on_report is not None:
            sub.on_report(sub, entries)
        self._send_action(session, status_response(Status.SUCCESS), exchange_id, False)
