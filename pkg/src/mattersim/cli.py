"""Command-line entry point: ``mattersim {simulate,overhead,rtt,lifetime,schc}``.

Exit codes: 0 success, 2 workload failure, 64 usage error, 65 bad input file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path as FsPath
from typing import Sequence

from . import encap, netsim, perfmodel, schc
from . import scenario as scn
from .msglayer import MessageHeader

EXIT_OK = 0
EXIT_WORKLOAD = 2
EXIT_USAGE = 64
EXIT_DATAERR = 65
FORMAT_VERSION = 1


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(text: str, dest: str | None) -> None:
    if dest is None or dest == "-":
        sys.stdout.write(text)
    else:
        FsPath(dest).write_text(text)


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [[str(c) for c in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _opts(text: str) -> encap.CompressionOptions:
    try:
        return encap.CompressionOptions.from_letters(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _hops(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N, N..M or N,M,..., got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# -- simulate --------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        data = scn.load(args.scenario)
    except scn.ScenarioError as exc:
        raise InputError(str(exc)) from None
    if args.loss is not None:
        for sc in data["topology"]["subnets"]:
            sc["loss"] = args.loss
    try:
        result = scn.run(data, seed=args.seed)
    except scn.ScenarioError as exc:
        raise InputError(str(exc)) from None
    outputs = data.get("outputs", {})
    trace_out = args.trace_out or outputs.get("trace")
    stats_out = args.stats_out or outputs.get("stats")
    if trace_out:
        FsPath(trace_out).write_text(result.trace_csv())
    if stats_out:
        FsPath(stats_out).write_text(result.stats_json())
    stats = result.sim.stats
    kinds: dict[str, int] = {}
    for row in stats.interactions:
        kinds[row["kind"]] = kinds.get(row["kind"], 0) + 1
    summary = {
        "format_version": FORMAT_VERSION,
        "scenario": data.get("name", FsPath(args.scenario).stem),
        "seed": result.sim.seed,
        "interactions": dict(sorted(kinds.items())),
        "failed": len(result.failures),
        "retransmissions": stats.total("retransmissions"),
        "standalone_acks": stats.total("standalone_acks"),
        "virtual_time_s": result.sim.now / netsim.NS_PER_S,
    }
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    for f in result.failures:
        print(f"failed: {f}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_WORKLOAD


# -- overhead --------------------------------------------------------------

TECH_TITLES = {"thread": "Thread", "wifi": "WiFi", "ethernet": "Ethernet"}
LAYER_ORDER = ["IEEE 802.15.4", "IEEE 802.11", "Ethernet", "LLC/SNAP", "Mesh-under", "IPv6", "UDP",
               "Message Layer"]


def _techs(text: str) -> list[str]:
    techs = [t.strip().lower() for t in text.split(",") if t.strip()]
    bad = [t for t in techs if t not in TECH_TITLES]
    if bad or not techs:
        raise argparse.ArgumentTypeError(f"technologies must be among {', '.join(TECH_TITLES)}")
    return list(dict.fromkeys(techs))


def cmd_overhead(args: argparse.Namespace) -> int:
    bds = {}
    for tech in args.tech:
        try:
            bds[tech] = encap.breakdown(tech, args.header, args.payload, multihop=args.multihop,
                                        opts=args.opts, allow_compressed_header=args.allow_compressed_header)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    layers: list[str] = []
    for bd in bds.values():
        layers += [name for name, _ in bd.layers if name not in layers]
    layers.sort(key=lambda n: LAYER_ORDER.index(n) if n in LAYER_ORDER else len(LAYER_ORDER))
    if args.format == "csv":
        header = (["format_version", "layer"] + [f"{t}_bytes" for t in bds] + ["payload_bytes"]
                  + [f"{t}_total_bytes" for t in bds] + [f"{t}_fragment_count" for t in bds])
        rows = [[FORMAT_VERSION, name]
                + [dict(bd.layers).get(name, 0) for bd in bds.values()] + [args.payload]
                + [bd.total_bytes for bd in bds.values()] + [bd.fragment_count for bd in bds.values()]
                for name in layers]
        _write(_csv(rows, header), args.output)
        return EXIT_OK
    rows = [[name] + [dict(bd.layers).get(name, "-") for bd in bds.values()] for name in layers]
    rows.append(["Payload"] + [bd.payload_bytes for bd in bds.values()])
    if any(bd.fragmented for bd in bds.values()):
        rows.append(["Fragment headers"] + [bd.fragment_overhead for bd in bds.values()])
    rows.append(["Total"] + [bd.total_bytes for bd in bds.values()])
    text = _table(rows, ["layer"] + [TECH_TITLES[t] for t in bds])
    for t, bd in bds.items():
        if bd.fragmented:
            text += f"{TECH_TITLES[t]}: fragmented into {bd.fragment_count} frames\n"
    _write(text, args.output)
    return EXIT_OK


# -- rtt -------------------------------------------------------------------

RTT_FIELDS = ["format_version", "technology", "hops", "request_payload", "response_payload",
              "request_frame_bytes", "response_frame_bytes", "include_phy_preamble",
              "per_hop_turnaround_s", "rtt_ms"]


def cmd_rtt(args: argparse.Namespace) -> int:
    rows = []
    for h in args.hops:
        multihop = h > 1 and args.tech == "thread"
        try:
            req = encap.breakdown(args.tech, args.header, args.req_payload, multihop=multihop,
                                  opts=args.opts).total_bytes
            resp = encap.breakdown(args.tech, args.header, args.resp_payload, multihop=multihop,
                                   opts=args.opts).total_bytes
            rtt = perfmodel.theoretical_rtt(perfmodel.RttQuery(
                args.tech, h, req, resp, args.turnaround, not args.no_preamble, args.bitrate))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows.append([FORMAT_VERSION, args.tech, h, args.req_payload, args.resp_payload, req, resp,
                     int(not args.no_preamble), args.turnaround, f"{rtt * 1000:.6f}"])
    fmt = _csv if args.format == "csv" else _table
    _write(fmt(rows, RTT_FIELDS), args.output)
    return EXIT_OK


# -- lifetime --------------------------------------------------------------

def _profile(path: str | None) -> perfmodel.EnergyProfile:
    if path is None:
        return perfmodel.EnergyProfile()
    try:
        data = json.loads(FsPath(path).read_text())
        if not isinstance(data, dict):
            raise ValueError("profile must be a JSON object")
        return perfmodel.EnergyProfile.from_dict(data)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_lifetime(args: argparse.Namespace) -> int:
    profile = _profile(args.profile)
    try:
        if args.sweep:
            rows = perfmodel.sweep_lifetime(
                profile,
                args.sleep_intervals or perfmodel.DEFAULT_SLEEP_INTERVALS,
                args.report_periods or perfmodel.DEFAULT_REPORT_PERIODS,
                args.frame_sizes or None)
        else:
            q = perfmodel.LifetimeQuery(profile, args.sleep_interval, args.report_period, args.frame_bytes)
            rows = [perfmodel.SweepRow(q.sleep_interval, q.report_period, q.report_frame_bytes,
                                       perfmodel.average_current(q), perfmodel.lifetime(q))]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = perfmodel.sweep_to_csv(rows, profile)
    if args.format == "table":
        parsed = list(csv.reader(io.StringIO(text)))
        keep = [i for i, h in enumerate(parsed[0]) if not h.startswith("profile_") and h != "format_version"]
        text = _table([[r[i] for i in keep] for r in parsed[1:]], [parsed[0][i] for i in keep])
        if profile.calibrated:
            text += "energy profile: calibrated defaults (not hardware measurements)\n"
    _write(text, args.output)
    return EXIT_OK


# -- schc ------------------------------------------------------------------

SCHC_FIELDS = ["format_version", "time_ns", "src", "dst", "flags", "rule_id",
               "original_header_bytes", "compressed_header_bytes"]


def _trace_headers(path: str) -> list[tuple[netsim.TraceRow, MessageHeader]]:
    try:
        rows = netsim.read_trace_csv(FsPath(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: not a simulation trace ({exc})") from None
    out = []
    for r in rows:
        if r.event_kind != "msg_tx":
            continue
        fields = dict(kv.split("=", 1) for kv in r.detail.split(";") if "=" in kv)
        try:
            hdr, _ = MessageHeader.decode(bytes.fromhex(fields["hdr"]))
        except (KeyError, ValueError) as exc:
            raise InputError(f"{path}: msg_tx row at {r.time_ns} ns has no decodable header") from exc
        out.append((r, hdr))
    return out


def cmd_schc(args: argparse.Namespace) -> int:
    msgs = _trace_headers(args.trace)
    if args.context_in:
        try:
            ctx = schc.SchcContext.from_json(FsPath(args.context_in).read_text())
        except OSError as exc:
            raise InputError(f"cannot read {args.context_in}: {exc.strerror}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{args.context_in}: bad context ({exc})") from None
    else:
        ctx = schc.build_context(schc.flows_from_headers(h for _, h in msgs))
    if args.context_out:
        FsPath(args.context_out).write_text(ctx.to_json())
    senders: dict[tuple[int, int], schc.SchcCompressor] = {}
    rows = []
    orig_total = comp_total = 0
    for r, hdr in msgs:
        c = senders.setdefault((r.src, r.dst), schc.SchcCompressor(ctx))
        out = c.compress(hdr)
        rows.append([FORMAT_VERSION, r.time_ns, r.src, r.dst, r.flags, out[0], hdr.length, len(out)])
        orig_total += hdr.length
        comp_total += len(out)
    ambiguous = sum(c.state.ambiguities for c in senders.values())
    saved = orig_total - comp_total
    pct = 100.0 * saved / orig_total if orig_total else 0.0
    summary = (f"messages={len(rows)} rules={len(ctx.rules)} original_bytes={orig_total} "
               f"compressed_bytes={comp_total} saved_bytes={saved} saved_pct={pct:.2f} "
               f"fallbacks={ambiguous} context_sha256={ctx.digest}\n")
    if args.format == "csv":
        _write(_csv(rows, SCHC_FIELDS), args.output)
        sys.stderr.write(summary)
    else:
        _write(_table([r[1:] for r in rows], SCHC_FIELDS[1:]) + summary, args.output)
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mattersim", description="Smart-home protocol stack simulator and analyzers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a scenario file",
                       description="Run a scenario: commission sessions, execute the workload, "
                                   "write the trace CSV and stats JSON.")
    s.add_argument("scenario", help="scenario JSON file")
    s.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    s.add_argument("--loss", type=float, default=None, help="override the loss rate of every subnet")
    s.add_argument("--trace-out", default=None, help="write the event trace CSV here")
    s.add_argument("--stats-out", default=None, help="write the stats JSON here")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("overhead", help="per-layer byte accounting of one message",
                       description="Per-layer bytes of one framed message.")
    o.add_argument("--payload", type=int, default=25, help="application payload bytes (default 25)")
    o.add_argument("--header", type=int, default=18, help="message header bytes, 14 or 18 (default 18)")
    o.add_argument("--multihop", action="store_true", help="add the mesh-under header (thread)")
    o.add_argument("--opts", type=_opts, default=encap.NO_COMPRESSION,
                   help="6LoWPAN optimizations, e.g. a,b,c (a: addresses, b: ports, c: checksum)")
    o.add_argument("--tech", type=_techs, default=["thread", "wifi"],
                   help="comma-separated technologies: thread, wifi, ethernet (default thread,wifi)")
    o.add_argument("--allow-compressed-header", action="store_true",
                   help="accept header sizes other than 14/18 (SCHC-compressed headers)")
    o.add_argument("--format", choices=["table", "csv"], default="table", help="output format")
    o.add_argument("-o", "--output", default=None, help="output file (default stdout)")
    o.set_defaults(func=cmd_overhead)

    r = sub.add_parser("rtt", help="theoretical round-trip time",
                       description="Theoretical request/response RTT over 1..4 hops.")
    r.add_argument("--tech", choices=["thread", "wifi"], default="thread", help="technology (default thread)")
    r.add_argument("--hops", type=_hops, default=[1], help="hop counts: N, N..M or a list (default 1)")
    r.add_argument("--req-payload", type=int, default=25, help="request payload bytes (default 25)")
    r.add_argument("--resp-payload", type=int, default=33, help="response payload bytes (default 33)")
    r.add_argument("--header", type=int, default=18, help="message header bytes (default 18)")
    r.add_argument("--opts", type=_opts, default=encap.NO_COMPRESSION, help="6LoWPAN optimizations")
    r.add_argument("--turnaround", type=float, default=0.0, help="per-hop turnaround in seconds (default 0)")
    r.add_argument("--no-preamble", action="store_true", help="do not count the 6-byte PHY preamble")
    r.add_argument("--bitrate", type=float, default=None, help="override the link bitrate (bit/s)")
    r.add_argument("--format", choices=["table", "csv"], default="csv", help="output format (default csv)")
    r.add_argument("-o", "--output", default=None, help="output file (default stdout)")
    r.set_defaults(func=cmd_rtt)

    lt = sub.add_parser("lifetime", help="battery lifetime of a sleepy end device",
                        description="Battery lifetime from the average-current model.")
    lt.add_argument("--profile", default=None, help="energy profile JSON (default: calibrated defaults)")
    lt.add_argument("--sweep", action="store_true", help="emit the full parameter grid")
    lt.add_argument("--sleep-interval", type=float, default=300.0, help="poll period in s (default 300)")
    lt.add_argument("--report-period", type=float, default=300.0, help="report period in s (default 300)")
    lt.add_argument("--frame-bytes", type=int, default=102, help="report frame bytes (default 102)")
    lt.add_argument("--sleep-intervals", type=_floats, default=None, help="sweep axis, comma-separated")
    lt.add_argument("--report-periods", type=_floats, default=None, help="sweep axis, comma-separated")
    lt.add_argument("--frame-sizes", type=_ints, default=None, help="sweep axis (default 77,127)")
    lt.add_argument("--format", choices=["table", "csv"], default="csv", help="output format (default csv)")
    lt.add_argument("-o", "--output", default=None, help="output file (default stdout)")
    lt.set_defaults(func=cmd_lifetime)

    c = sub.add_parser("schc", help="header compression savings over a trace",
                       description="Compress every Message Layer header of a simulation trace.")
    c.add_argument("--trace", required=True, help="trace CSV written by simulate")
    c.add_argument("--context-in", default=None, help="load the compression context from JSON")
    c.add_argument("--context-out", default=None, help="dump the compression context as JSON")
    c.add_argument("--format", choices=["table", "csv"], default="table", help="output format")
    c.add_argument("-o", "--output", default=None, help="output file (default stdout)")
    c.set_defaults(func=cmd_schc)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mattersim {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"mattersim {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATAERR


if __name__ == "__main__":
    sys.exit(main())
