"""Per-layer byte accounting for Message Layer data units over Thread and Wi-Fi.

All sizes are in bytes and exclude PHY preamble/SFD, which only matters for
airtime (see :data:`THREAD_PHY_PREAMBLE`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

THREAD_MAX_FRAME = 127
THREAD_PHY_PREAMBLE = 6

IEEE802154_HEADER_FOOTER = 17
MESH_UNDER_HEADER = 6
LOWPAN_IPV6 = 19
LOWPAN_UDP = 7
MIC_BYTES = 16

# Savings from the three 6LoWPAN techniques.
UDP_PORT_SAVING = 3  # 4-byte ports -> 1 byte
UDP_CHECKSUM_SAVING = 2
# IPHC base (2) + inline hop limit (1); addresses fully elided from context.
IPV6_FULL_CONTEXT = 3
MAX_CONTEXT_SLOTS = 16

FRAG_HEADER = 5

VALID_HEADER_SIZES = (14, 18)


@dataclass(frozen=True)
class CompressionOptions:
    """6LoWPAN optimizations applied on top of the baseline Thread encoding."""

    full_address_compression: bool = False
    udp_port_compression: bool = False
    elide_udp_checksum: bool = False
    context_slots_used: int = 1

    def __post_init__(self):
        if self.context_slots_used < 0:
            raise ValueError("context_slots_used must be non-negative")
        if self.full_address_compression and self.context_slots_used > MAX_CONTEXT_SLOTS:
            raise ValueError(
                f"full address compression needs <= {MAX_CONTEXT_SLOTS} context slots, "
                f"got {self.context_slots_used}"
            )

    @classmethod
    def from_letters(cls, letters: str, context_slots_used: int = 1) -> "CompressionOptions":
        """Parse ``"a,b,c"`` style option lists (empty string means none)."""
        chosen = {s.strip().lower() for s in letters.split(",") if s.strip()}
        unknown = chosen - {"a", "b", "c"}
        if unknown:
            raise ValueError(f"unknown compression options: {sorted(unknown)}")
        return cls("a" in chosen, "b" in chosen, "c" in chosen, context_slots_used)

    @property
    def letters(self) -> str:
        flags = zip("abc", (self.full_address_compression, self.udp_port_compression,
                            self.elide_udp_checksum))
        return ",".join(ch for ch, on in flags if on)


NO_COMPRESSION = CompressionOptions()
ALL_COMPRESSION = CompressionOptions(True, True, True)


@dataclass(frozen=True)
class WifiOverhead:
    # Standard header sizes; not read from any measurement.
    mac_header_fcs: int = 30
    llc_snap: int = 8
    ipv6: int = 40
    udp: int = 8


@dataclass(frozen=True)
class EthernetOverhead:
    mac_header_fcs: int = 18
    ipv6: int = 40
    udp: int = 8


@dataclass
class LayerBreakdown:
    technology: str
    layers: list[tuple[str, int]]
    payload_bytes: int
    header_bytes: int
    mic_bytes: int
    total_bytes: int = 0
    fragmented: bool = False
    fragment_count: int = 1
    fragment_overhead: int = 0

    def layer(self, name: str) -> int:
        for n, b in self.layers:
            if n == name:
                return b
        raise KeyError(name)

    @property
    def overhead_bytes(self) -> int:
        return self.total_bytes - self.payload_bytes

    def as_rows(self) -> list[tuple[str, int]]:
        rows = list(self.layers)
        if self.fragment_overhead:
            rows.append(("6LoWPAN fragmentation", self.fragment_overhead))
        rows.append(("Payload", self.payload_bytes))
        return rows


def _check_header(header_bytes: int, allow_compressed: bool) -> None:
    if header_bytes in VALID_HEADER_SIZES:
        return
    if allow_compressed and 1 <= header_bytes <= VALID_HEADER_SIZES[-1] + 1:
        return
    raise ValueError(f"Message Layer header must be 14 or 18 bytes, got {header_bytes}")


def thread_layers(multihop: bool, opts: CompressionOptions, header_bytes: int,
                  mic_bytes: int = MIC_BYTES) -> list[tuple[str, int]]:
    udp = LOWPAN_UDP
    if opts.udp_port_compression:
        udp -= UDP_PORT_SAVING
    if opts.elide_udp_checksum:
        udp -= UDP_CHECKSUM_SAVING
    ipv6 = IPV6_FULL_CONTEXT if opts.full_address_compression else LOWPAN_IPV6
    layers = [("IEEE 802.15.4", IEEE802154_HEADER_FOOTER)]
    if multihop:
        layers.append(("Mesh-under", MESH_UNDER_HEADER))
    layers += [("IPv6", ipv6), ("UDP", udp), ("Message Layer", header_bytes + mic_bytes)]
    return layers


def thread_breakdown(header_bytes: int, payload_bytes: int, multihop: bool = False,
                     opts: CompressionOptions = NO_COMPRESSION, *,
                     mic_bytes: int = MIC_BYTES, allow_compressed_header: bool = False
                     ) -> LayerBreakdown:
    """Bytes per layer for one Message Layer message carried over Thread.

    ``allow_compressed_header`` admits SCHC-compressed header sizes (< 14).
    When the frame exceeds 127 bytes the message is split into 6LoWPAN
    fragments; every fragment repeats the link (and mesh) header and adds a
    5-byte fragment header.
    """
    _check_header(header_bytes, allow_compressed_header)
    if payload_bytes < 0:
        raise ValueError("payload_bytes must be non-negative")
    layers = thread_layers(multihop, opts, header_bytes, mic_bytes)
    total = sum(b for _, b in layers) + payload_bytes
    bd = LayerBreakdown("Thread", layers, payload_bytes, header_bytes, mic_bytes)
    if total <= THREAD_MAX_FRAME:
        bd.total_bytes = total
        return bd
    per_frame = IEEE802154_HEADER_FOOTER + (MESH_UNDER_HEADER if multihop else 0)
    ip_bytes = total - per_frame
    capacity = THREAD_MAX_FRAME - per_frame - FRAG_HEADER
    count = math.ceil(ip_bytes / capacity)
    bd.fragmented = True
    bd.fragment_count = count
    bd.fragment_overhead = (count - 1) * per_frame + count * FRAG_HEADER
    bd.total_bytes = total + bd.fragment_overhead
    return bd


def wifi_breakdown(header_bytes: int, payload_bytes: int,
                   overhead: WifiOverhead = WifiOverhead(), *,
                   mic_bytes: int = MIC_BYTES, allow_compressed_header: bool = False
                   ) -> LayerBreakdown:
    _check_header(header_bytes, allow_compressed_header)
    if payload_bytes < 0:
        raise ValueError("payload_bytes must be non-negative")
    layers = [
        ("IEEE 802.11", overhead.mac_header_fcs),
        ("LLC/SNAP", overhead.llc_snap),
        ("IPv6", overhead.ipv6),
        ("UDP", overhead.udp),
        ("Message Layer", header_bytes + mic_bytes),
    ]
    total = sum(b for _, b in layers) + payload_bytes
    return LayerBreakdown("WiFi", layers, payload_bytes, header_bytes, mic_bytes, total)


def ethernet_breakdown(header_bytes: int, payload_bytes: int,
                       overhead: EthernetOverhead = EthernetOverhead(), *,
                       mic_bytes: int = MIC_BYTES, allow_compressed_header: bool = False
                       ) -> LayerBreakdown:
    _check_header(header_bytes, allow_compressed_header)
    layers = [
        ("Ethernet", overhead.mac_header_fcs),
        ("IPv6", overhead.ipv6),
        ("UDP", overhead.udp),
        ("Message Layer", header_bytes + mic_bytes),
    ]
    total = sum(b for _, b in layers) + payload_bytes
    return LayerBreakdown("Ethernet", layers, payload_bytes, header_bytes, mic_bytes, total)


def breakdown(technology: str, header_bytes: int, payload_bytes: int, *,
              multihop: bool = False, opts: CompressionOptions = NO_COMPRESSION,
              mic_bytes: int = MIC_BYTES, wifi: WifiOverhead = WifiOverhead(),
              allow_compressed_header: bool = False) -> LayerBreakdown:
    """Dispatch on technology name (``thread``, ``wifi`` or ``ethernet``)."""
    tech = technology.lower()
    kw = dict(mic_bytes=mic_bytes, allow_compressed_header=allow_compressed_header)
    if tech == "thread":
        return thread_breakdown(header_bytes, payload_bytes, multihop, opts, **kw)
    if tech == "wifi":
        return wifi_breakdown(header_bytes, payload_bytes, wifi, **kw)
    if tech == "ethernet":
        return ethernet_breakdown(header_bytes, payload_bytes, **kw)
    raise ValueError(f"unknown technology {technology!r}")


def max_unfragmented_payload(multihop: bool = False,
                             opts: CompressionOptions = NO_COMPRESSION,
                             header_bytes: int = 18, mic_bytes: int = MIC_BYTES) -> int:
    """Largest Message Layer payload that still fits one 127-byte Thread frame."""
    overhead = sum(b for _, b in thread_layers(multihop, opts, header_bytes, mic_bytes))
    return THREAD_MAX_FRAME - overhead


def frame_size_range(multihop: bool = False, opts: CompressionOptions = NO_COMPRESSION,
                     header_bytes: int = 18) -> tuple[int, int]:
    """Shortest (empty payload) and longest non-fragmented Thread frame."""
    shortest = thread_breakdown(header_bytes, 0, multihop, opts,
                                allow_compressed_header=True).total_bytes
    return shortest, THREAD_MAX_FRAME
