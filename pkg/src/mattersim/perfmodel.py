"""Closed-form latency and battery-lifetime models.

``theoretical_rtt`` assumes ideal links and zero processing delay, counting
data frames only. ``lifetime`` is an average-current model of a sleepy Thread
end device that polls its parent every ``sleep_interval`` seconds and emits
one report every ``report_period`` seconds.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from . import encap

THREAD_BITRATE = 250_000
WIFI_BITRATE = 54_000_000
HOURS_PER_YEAR = 8766.0
MAX_SLEEP_INTERVAL = 3600.0
MAX_HOPS = 4


@dataclass(frozen=True)
class RttQuery:
    technology: str
    hops: int
    request_frame_bytes: int
    response_frame_bytes: int
    per_hop_turnaround: float = 0.0
    include_phy_preamble: bool = True
    bitrate: float | None = None

    def __post_init__(self):
        if self.technology.lower() not in ("thread", "wifi"):
            raise ValueError(f"unknown technology {self.technology!r}")
        if not 1 <= self.hops <= MAX_HOPS:
            raise ValueError(f"hops must be in 1..{MAX_HOPS}, got {self.hops}")
        if self.request_frame_bytes < 0 or self.response_frame_bytes < 0:
            raise ValueError("frame sizes must be non-negative")
        if self.per_hop_turnaround < 0:
            raise ValueError("per_hop_turnaround must be non-negative")

    @property
    def rate(self) -> float:
        if self.bitrate is not None:
            return float(self.bitrate)
        return THREAD_BITRATE if self.technology.lower() == "thread" else WIFI_BITRATE

    @property
    def preamble(self) -> int:
        # Wi-Fi preambles are fixed-duration, not byte-counted.
        if self.include_phy_preamble and self.technology.lower() == "thread":
            return encap.THREAD_PHY_PREAMBLE
        return 0


def theoretical_rtt(q: RttQuery) -> float:
    """Round-trip time in seconds for one request/response pair."""
    req = q.request_frame_bytes + q.preamble
    resp = q.response_frame_bytes + q.preamble
    per_hop = (req * 8 + resp * 8) / q.rate + 2 * q.per_hop_turnaround
    return q.hops * per_hop


def rtt_for_payloads(technology: str, hops: int, request_payload: int = 25,
                     response_payload: int = 33, *, header_bytes: int = 18,
                     opts: encap.CompressionOptions = encap.NO_COMPRESSION,
                     per_hop_turnaround: float = 0.0, include_phy_preamble: bool = True,
                     bitrate: float | None = None) -> float:
    """RTT for Message Layer payload sizes, framed by :mod:`encap`.

    Thread paths longer than one hop use the mesh-under framing.
    """
    kw = dict(multihop=hops > 1, opts=opts)
    req = encap.breakdown(technology, header_bytes, request_payload, **kw).total_bytes
    resp = encap.breakdown(technology, header_bytes, response_payload, **kw).total_bytes
    return theoretical_rtt(RttQuery(technology, hops, req, resp, per_hop_turnaround,
                                    include_phy_preamble, bitrate))


@dataclass(frozen=True)
class EnergyProfile:
    """Device current/charge figures.

    The defaults are calibrated against the qualitative behaviour of a
    CR2032-powered Thread sleepy end device, not measured on hardware.
    """

    sleep_current: float = 2.0  # uA
    poll_charge: float = 30.0  # uC per poll
    report_fixed_charge: float = 100.0  # uC per report
    report_per_byte_charge: float = 0.2  # uC per frame byte
    battery_capacity: float = 230.0  # mAh
    calibrated: bool = True

    def __post_init__(self):
        for name in ("sleep_current", "poll_charge", "report_fixed_charge",
                     "report_per_byte_charge", "battery_capacity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def report_charge(self, frame_bytes: float) -> float:
        return self.report_fixed_charge + self.report_per_byte_charge * frame_bytes

    @classmethod
    def from_dict(cls, data: dict) -> "EnergyProfile":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown energy profile keys: {sorted(unknown)}")
        # a profile loaded from user figures is not the calibrated default unless it says so
        return cls(**{"calibrated": False, **data})


@dataclass(frozen=True)
class LifetimeQuery:
    profile: EnergyProfile = field(default_factory=EnergyProfile)
    sleep_interval: float = 0.3
    report_period: float = 300.0
    report_frame_bytes: int = 102

    def __post_init__(self):
        if self.sleep_interval <= 0 or self.report_period <= 0:
            raise ValueError("sleep_interval and report_period must be positive")
        if self.sleep_interval > MAX_SLEEP_INTERVAL:
            raise ValueError(
                f"sleep_interval {self.sleep_interval} s exceeds the {MAX_SLEEP_INTERVAL:.0f} s maximum"
            )
        if self.report_frame_bytes > encap.THREAD_MAX_FRAME:
            raise ValueError(
                f"report frame of {self.report_frame_bytes} bytes would be fragmented; "
                "size it with encap.max_unfragmented_payload"
            )


def average_current(q: LifetimeQuery) -> float:
    """Average current draw in uA."""
    p = q.profile
    return (p.sleep_current + p.poll_charge / q.sleep_interval
            + p.report_charge(q.report_frame_bytes) / q.report_period)


def lifetime(q: LifetimeQuery) -> float:
    """Battery lifetime in years."""
    i_avg = average_current(q)
    if i_avg <= 0:
        return float("inf")
    return q.profile.battery_capacity * 1000.0 / i_avg / HOURS_PER_YEAR


DEFAULT_SLEEP_INTERVALS = (0.3, 1.0, 5.0, 10.0, 30.0, 60.0, 300.0, 900.0, 1800.0, 3600.0)
DEFAULT_REPORT_PERIODS = (10.0, 60.0, 300.0, 900.0, 3600.0)


def default_frame_sizes() -> tuple[int, int]:
    return encap.frame_size_range()


@dataclass
class SweepRow:
    sleep_interval: float
    report_period: float
    frame_bytes: int
    average_current_ua: float
    lifetime_years: float


def sweep_lifetime(profile: EnergyProfile | None = None,
                   sleep_intervals: Sequence[float] = DEFAULT_SLEEP_INTERVALS,
                   report_periods: Sequence[float] = DEFAULT_REPORT_PERIODS,
                   frame_sizes: Iterable[int] | None = None) -> list[SweepRow]:
    """Full grid of lifetimes; rows ordered by frame, report period, sleep interval."""
    profile = profile or EnergyProfile()
    frames = tuple(frame_sizes) if frame_sizes is not None else default_frame_sizes()
    rows = []
    for fb in frames:
        for rp in report_periods:
            for si in sleep_intervals:
                q = LifetimeQuery(profile, si, rp, fb)
                rows.append(SweepRow(si, rp, fb, average_current(q), lifetime(q)))
    return rows


def sweep_to_csv(rows: Sequence[SweepRow], profile: EnergyProfile) -> str:
    buf = io.StringIO()
    prof = asdict(profile)
    fields = ["format_version", *[f"profile_{k}" for k in prof],
              "sleep_interval_s", "report_period_s", "frame_bytes",
              "average_current_ua", "lifetime_years"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([1, *prof.values(), r.sleep_interval, r.report_period, r.frame_bytes,
                    f"{r.average_current_ua:.6f}", f"{r.lifetime_years:.6f}"])
    return buf.getvalue()
