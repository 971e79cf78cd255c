"""Deterministic discrete-event network simulator.

Time is an integer count of nanoseconds. Subnets are Thread-like meshes
(routing abstracted to configured hop counts) or Wi-Fi/Ethernet stars; nodes
belonging to two or more subnets act as border routers. Every frame put on air
is sized by :mod:`mattersim.encap` for the technology of the hop it crosses.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, NamedTuple

import numpy as np

from . import encap

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

IPV6_MIN_MTU = 1280
FORMAT_VERSION = 1

UNRELIABLE = "unreliable"
RELIABLE_STREAM = "reliable-stream"

DEFAULT_BITRATES = {"thread": 250_000, "wifi": 54_000_000, "ethernet": 100_000_000}


class NetSimError(Exception):
    pass


class ConfigurationError(NetSimError):
    pass


class NoRouteError(NetSimError):
    pass


class OversizeError(NetSimError):
    pass


# -- clock & futures -------------------------------------------------------

class Timer:
    __slots__ = ("time", "fn", "args", "cancelled")

    def __init__(self, time: int, fn: Callable, args: tuple):
        self.time = time
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class VirtualClock:
    """Event queue ordered by (time, insertion sequence)."""

    def __init__(self):
        self.now = 0
        self._queue: list[tuple[int, int, Timer]] = []
        self._seq = itertools.count()

    def schedule_at(self, time: int, fn: Callable, *args) -> Timer:
        time = int(time)
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        t = Timer(time, fn, args)
        heapq.heappush(self._queue, (time, next(self._seq), t))
        return t

    def schedule(self, delay: int, fn: Callable, *args) -> Timer:
        return self.schedule_at(self.now + int(delay), fn, *args)

    @property
    def pending_events(self) -> int:
        return sum(1 for _, _, t in self._queue if not t.cancelled)

    def step(self) -> bool:
        while self._queue:
            time, _, t = heapq.heappop(self._queue)
            if t.cancelled:
                continue
            self.now = time
            t.fn(*t.args)
            return True
        return False

    def _run(self, limit: int | None) -> None:
        while self._queue:
            time, _, t = self._queue[0]
            if limit is not None and time > limit:
                break
            heapq.heappop(self._queue)
            if t.cancelled:
                continue
            self.now = time
            t.fn(*t.args)
        if limit is not None and limit > self.now:
            self.now = limit


class Pending:
    """Minimal future resolved from event-loop callbacks."""

    def __init__(self, label: str = ""):
        self.label = label
        self.state = "pending"
        self.value: Any = None
        self.error: BaseException | None = None
        self._callbacks: list[Callable[["Pending"], None]] = []

    @property
    def done(self) -> bool:
        return self.state != "pending"

    @property
    def failed(self) -> bool:
        return self.state == "failed"

    def resolve(self, value: Any = None) -> None:
        if self.done:
            return
        self.state, self.value = "done", value
        self._fire()

    def fail(self, error: BaseException) -> None:
        if self.done:
            return
        self.state, self.error = "failed", error
        self._fire()

    def _fire(self) -> None:
        cbs, self._callbacks = self._callbacks, []
        for cb in cbs:
            cb(self)

    def add_done_callback(self, fn: Callable[["Pending"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def result(self) -> Any:
        if self.state == "pending":
            raise RuntimeError(f"{self.label or 'operation'} has not completed")
        if self.error is not None:
            raise self.error
        return self.value

    def __repr__(self):
        return f"<Pending {self.label} {self.state}>"


# -- topology --------------------------------------------------------------

@dataclass
class Subnet:
    name: str
    technology: str
    members: list[int]
    hops: dict[tuple[int, int], int] = field(default_factory=dict)
    default_hops: int = 1
    loss: float = 0.0
    propagation_delay_us: float = 0.0
    bitrate: float | None = None
    link_retries: int = 3
    retry_spacing_ms: float = 5.0
    include_phy_preamble: bool = True
    compression: encap.CompressionOptions = encap.NO_COMPRESSION
    directed_loss: dict[tuple[int, int], float] = field(default_factory=dict)  # (src, dst) overrides

    def __post_init__(self):
        self.technology = self.technology.lower()
        if self.technology not in DEFAULT_BITRATES:
            raise ConfigurationError(f"subnet {self.name}: unknown technology {self.technology!r}")
        if not all(0.0 <= p <= 1.0 for p in (self.loss, *self.directed_loss.values())):
            raise ConfigurationError(f"subnet {self.name}: loss must be in [0, 1]")
        if self.link_retries < 0:
            raise ConfigurationError(f"subnet {self.name}: link_retries must be >= 0")
        if self.default_hops < 1 or any(h < 1 for h in self.hops.values()):
            raise ConfigurationError(f"subnet {self.name}: hop counts must be >= 1")
        if self.technology != "thread" and (self.default_hops != 1 or any(h != 1 for h in self.hops.values())):
            raise ConfigurationError(f"subnet {self.name}: only Thread subnets are multihop")
        if self.bitrate is None:
            self.bitrate = DEFAULT_BITRATES[self.technology]
        self.hops = {(min(a, b), max(a, b)): h for (a, b), h in self.hops.items()}

    def loss_rate(self, src: int, dst: int) -> float:
        return self.directed_loss.get((src, dst), self.loss)

    def hop_count(self, a: int, b: int) -> int:
        return self.hops.get((min(a, b), max(a, b)), self.default_hops)

    @property
    def preamble_bytes(self) -> int:
        if self.include_phy_preamble and self.technology == "thread":
            return encap.THREAD_PHY_PREAMBLE
        return 0


class Segment(NamedTuple):
    subnet: Subnet
    src: int
    dst: int
    hops: int


class Topology:
    def __init__(self, subnets: list[Subnet]):
        names = [s.name for s in subnets]
        if len(set(names)) != len(names):
            raise ConfigurationError("subnet names must be unique")
        self.subnets = subnets
        self._routes: dict[tuple[int, int], list[Segment]] = {}

    @property
    def nodes(self) -> list[int]:
        return sorted({n for s in self.subnets for n in s.members})

    @property
    def border_routers(self) -> list[int]:
        counts: dict[int, int] = {}
        for s in self.subnets:
            for n in set(s.members):
                counts[n] = counts.get(n, 0) + 1
        return sorted(n for n, c in counts.items() if c >= 2)

    def subnets_of(self, node: int) -> list[Subnet]:
        return [s for s in self.subnets if node in s.members]

    def route(self, a: int, b: int) -> list[Segment]:
        """Least-hop route; ties broken by the lexicographically smallest node sequence."""
        key = (a, b)
        if key in self._routes:
            return self._routes[key]
        nodes = set(self.nodes)
        if a not in nodes or b not in nodes:
            raise NoRouteError(f"no route {a} -> {b}: unknown node")
        if a == b:
            raise NoRouteError("source and destination are the same node")
        best: dict[int, tuple[int, tuple[int, ...]]] = {a: (0, (a,))}
        tie = itertools.count()
        heap = [(0, (a,), next(tie), a, ())]
        done: dict[int, tuple] = {}
        while heap:
            cost, seq, _, n, segs = heapq.heappop(heap)
            if n in done:
                continue
            done[n] = segs
            if n == b:
                break
            for s in self.subnets:
                if n not in s.members:
                    continue
                for m in s.members:
                    if m == n or m in done:
                        continue
                    h = s.hop_count(n, m)
                    cand = (cost + h, seq + (m,))
                    if m not in best or cand < best[m]:
                        best[m] = cand
                        heapq.heappush(heap, (cand[0], cand[1], next(tie), m,
                                              segs + (Segment(s, n, m, h),)))
        if b not in done:
            raise NoRouteError(f"no route {a} -> {b}")
        self._routes[key] = list(done[b])
        return self._routes[key]

    def route_hops(self, a: int, b: int) -> list[str]:
        """Technology of each hop along the route, e.g. ``['thread'] * 3 + ['wifi']``."""
        return [seg.subnet.technology for seg in self.route(a, b) for _ in range(seg.hops)]

    def check_connected(self) -> None:
        nodes = self.nodes
        if not nodes:
            raise ConfigurationError("topology has no nodes")
        seen = {nodes[0]}
        frontier = [nodes[0]]
        while frontier:
            n = frontier.pop()
            for s in self.subnets_of(n):
                for m in s.members:
                    if m not in seen:
                        seen.add(m)
                        frontier.append(m)
        missing = sorted(set(nodes) - seen)
        if missing:
            raise ConfigurationError(f"disconnected fabric: nodes {missing} unreachable from {nodes[0]}")


def build_topology(config: dict) -> Topology:
    """Build and validate a topology from the scenario ``topology`` section."""
    subnets = []
    for sc in config.get("subnets", []):
        hops = {(int(a), int(b)): int(h) for a, b, h in sc.get("hops", [])}
        comp = sc.get("compression", "")
        subnets.append(Subnet(
            name=sc["name"],
            technology=sc["technology"],
            members=[int(m) for m in sc["members"]],
            hops=hops,
            default_hops=int(sc.get("default_hops", 1)),
            loss=float(sc.get("loss", 0.0)),
            directed_loss={(int(a), int(b)): float(p) for a, b, p in sc.get("directed_loss", [])},
            propagation_delay_us=float(sc.get("propagation_delay_us", 0.0)),
            bitrate=sc.get("bitrate"),
            link_retries=int(sc.get("link_retries", 3)),
            retry_spacing_ms=float(sc.get("retry_spacing_ms", 5.0)),
            include_phy_preamble=bool(sc.get("include_phy_preamble", True)),
            compression=encap.CompressionOptions.from_letters(comp) if isinstance(comp, str)
            else encap.CompressionOptions(**comp),
        ))
    topo = Topology(subnets)
    topo.check_connected()
    return topo


# -- datagrams, stats, trace -----------------------------------------------

class Address(NamedTuple):
    subnet: str
    node: int


@dataclass
class Datagram:
    id: int
    src: Address
    dst: Address
    payload: bytes
    transport_kind: str = UNRELIABLE
    header_len: int = 14
    mic_len: int = 16
    flags: str = ""

    @property
    def body_len(self) -> int:
        return len(self.payload) - self.header_len - self.mic_len


class TraceRow(NamedTuple):
    time_ns: int
    event_kind: str
    src: int
    dst: int
    bytes: int
    technology: str
    flags: str
    detail: str = ""


TRACE_FIELDS = list(TraceRow._fields)


@dataclass
class LinkCounters:
    sent: int = 0
    received: int = 0
    dropped: int = 0


@dataclass
class Stats:
    nodes: dict[int, dict[str, int]] = field(default_factory=dict)
    bytes_on_air: dict[str, int] = field(default_factory=dict)
    links: dict[str, LinkCounters] = field(default_factory=dict)
    interactions: list[dict] = field(default_factory=list)

    def count(self, node: int, key: str, n: int = 1) -> None:
        d = self.nodes.setdefault(node, {})
        d[key] = d.get(key, 0) + n

    def get(self, node: int, key: str) -> int:
        return self.nodes.get(node, {}).get(key, 0)

    def total(self, key: str) -> int:
        return sum(d.get(key, 0) for d in self.nodes.values())

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "nodes": {str(k): dict(sorted(v.items())) for k, v in sorted(self.nodes.items())},
            "bytes_on_air": dict(sorted(self.bytes_on_air.items())),
            "links": {k: vars(v).copy() for k, v in sorted(self.links.items())},
            "interactions": list(self.interactions),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "Stats":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported stats format_version {data.get('format_version')!r}")
        return cls(
            nodes={int(k): dict(v) for k, v in data["nodes"].items()},
            bytes_on_air=dict(data["bytes_on_air"]),
            links={k: LinkCounters(**v) for k, v in data["links"].items()},
            interactions=list(data["interactions"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Stats":
        return cls.from_dict(json.loads(text))


def trace_to_csv(rows: Iterable[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def read_trace_csv(text: str) -> list[TraceRow]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [TraceRow(int(r["time_ns"]), r["event_kind"], int(r["src"]), int(r["dst"]),
                     int(r["bytes"]), r["technology"], r["flags"], r.get("detail", ""))
            for r in rows]


# -- simulator -------------------------------------------------------------

DatagramHandler = Callable[[Datagram], None]


class Simulator(VirtualClock):
    def __init__(self, topology: Topology, seed: int = 0,
                 processing_delay_ns: int | dict[int, int] = 0, record_trace: bool = True):
        super().__init__()
        self.topology = topology
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.handlers: dict[int, DatagramHandler] = {}
        self.stats = Stats()
        self.trace: list[TraceRow] = []
        self.record_trace = record_trace
        self._processing = processing_delay_ns
        self._dgram_ids = itertools.count(1)
        self._streams: set[tuple[int, int]] = set()

    # tracing helpers
    def log(self, kind: str, src: int, dst: int, nbytes: int = 0, technology: str = "",
            flags: str = "", detail: str = "") -> None:
        if self.record_trace:
            self.trace.append(TraceRow(self.now, kind, src, dst, nbytes, technology, flags, detail))

    def attach(self, node: int, handler: DatagramHandler) -> None:
        if node not in self.topology.nodes:
            raise ConfigurationError(f"node {node} is not part of the topology")
        self.handlers[node] = handler

    def processing_delay(self, node: int) -> int:
        if isinstance(self._processing, dict):
            return int(self._processing.get(node, 0))
        return int(self._processing)

    # frame accounting
    @staticmethod
    def frame_breakdown(seg: Segment, dg: Datagram) -> encap.LayerBreakdown:
        return encap.breakdown(
            seg.subnet.technology, dg.header_len, dg.body_len,
            multihop=seg.hops > 1, opts=seg.subnet.compression, mic_bytes=dg.mic_len,
            allow_compressed_header=True,
        )

    @staticmethod
    def airtime_ns(seg: Segment, bd: encap.LayerBreakdown) -> int:
        on_air = bd.total_bytes + seg.subnet.preamble_bytes * bd.fragment_count
        return round(on_air * 8 * NS_PER_S / seg.subnet.bitrate)

    def one_way_latency(self, route: list[Segment], dg: Datagram) -> int:
        t = 0
        for seg in route:
            hop = self.airtime_ns(seg, self.frame_breakdown(seg, dg)) + round(
                seg.subnet.propagation_delay_us * NS_PER_US)
            t += hop * seg.hops
        return t

    def send_datagram(self, src: int, dst: int, payload: bytes, *,
                      transport: str = UNRELIABLE, header_len: int = 14, mic_len: int = 16,
                      flags: str = "") -> Datagram:
        if len(payload) > IPV6_MIN_MTU:
            raise OversizeError(f"payload of {len(payload)} bytes exceeds {IPV6_MIN_MTU}")
        if transport not in (UNRELIABLE, RELIABLE_STREAM):
            raise ValueError(f"unknown transport {transport!r}")
        route = self.topology.route(src, dst)
        dg = Datagram(next(self._dgram_ids), Address(route[0].subnet.name, src),
                      Address(route[-1].subnet.name, dst), bytes(payload), transport,
                      header_len, mic_len, flags)
        self.stats.count(src, "datagrams_tx")
        start = 0
        if transport == RELIABLE_STREAM:
            pair = (min(src, dst), max(src, dst))
            if pair not in self._streams:
                self._streams.add(pair)
                probe = Datagram(0, dg.src, dg.dst, bytes(header_len + mic_len), transport,
                                 header_len, mic_len)
                start = 2 * self.one_way_latency(route, probe)
                self.log("stream_setup", src, dst, 0, "", "", f"d={dg.id};delay_ns={start}")
        self.schedule(start, self._hop, dg, route, 0, 0, 0)
        return dg

    def _hop(self, dg: Datagram, route: list[Segment], seg_i: int, hop_i: int, attempt: int) -> None:
        seg = route[seg_i]
        sub = seg.subnet
        a, b = seg.src, seg.dst
        bd = self.frame_breakdown(seg, dg)
        air = self.airtime_ns(seg, bd)
        prop = round(sub.propagation_delay_us * NS_PER_US)
        link_key = f"{sub.name}:{min(a, b)}-{max(a, b)}"
        link = self.stats.links.setdefault(link_key, LinkCounters())
        link.sent += 1
        self.stats.bytes_on_air[sub.technology] = self.stats.bytes_on_air.get(sub.technology, 0) + bd.total_bytes
        if hop_i == 0 and attempt == 0:
            self.stats.count(a, "frames_tx")
        detail = (f"d={dg.id};h={dg.header_len};p={dg.body_len};m={dg.mic_len};"
                  f"mh={int(seg.hops > 1)};opts={sub.compression.letters};"
                  f"hop={hop_i + 1}/{seg.hops};try={attempt};frags={bd.fragment_count}")
        self.log("frame_tx", a, b, bd.total_bytes, sub.technology, dg.flags, detail)

        lost = False
        loss = sub.loss_rate(a, b)
        if dg.transport_kind == UNRELIABLE and loss > 0.0:
            for _ in range(bd.fragment_count):
                if self.rng.random() < loss:
                    lost = True
        if lost:
            link.dropped += 1
            self.schedule(air, self._dropped, dg, route, seg_i, hop_i, attempt, detail)
            return
        link.received += 1
        self.schedule(air + prop, self._arrive, dg, route, seg_i, hop_i, detail)

    def _dropped(self, dg, route, seg_i, hop_i, attempt, detail) -> None:
        seg = route[seg_i]
        self.log("frame_drop", seg.src, seg.dst, 0, seg.subnet.technology, dg.flags, detail)
        if attempt < seg.subnet.link_retries:
            self.schedule(round(seg.subnet.retry_spacing_ms * NS_PER_MS),
                          self._hop, dg, route, seg_i, hop_i, attempt + 1)
        else:
            self.stats.count(dg.src.node, "datagrams_lost")
            self.log("datagram_lost", dg.src.node, dg.dst.node, len(dg.payload), "", dg.flags, f"d={dg.id}")

    def _arrive(self, dg, route, seg_i, hop_i, detail) -> None:
        seg = route[seg_i]
        self.log("frame_rx", seg.src, seg.dst, self.frame_breakdown(seg, dg).total_bytes,
                 seg.subnet.technology, dg.flags, detail)
        if hop_i + 1 < seg.hops:
            self._hop(dg, route, seg_i, hop_i + 1, 0)
            return
        self.stats.count(seg.dst, "frames_rx")
        if seg_i + 1 < len(route):
            # border router re-frames onto the next subnet
            self.stats.count(seg.dst, "forwarded")
            self._hop(dg, route, seg_i + 1, 0, 0)
            return
        self.schedule(self.processing_delay(dg.dst.node), self._deliver, dg)

    def _deliver(self, dg: Datagram) -> None:
        node = dg.dst.node
        self.stats.count(node, "datagrams_rx")
        handler = self.handlers.get(node)
        if handler is not None:
            handler(dg)

    # driving
    def run_until(self, t_ns: int) -> Stats:
        self._run(int(t_ns))
        return self.stats

    def run_to_completion(self, limit_ns: int | None = None) -> Stats:
        self._run(limit_ns)
        return self.stats

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)
