"""Static-context header compression for Message Layer headers and action paths.

Compressed header: ``rule_id(1)`` followed by the residues of the rule's
descriptors, in field order. Rule id 0xFF is reserved for headers that match
no rule and are carried verbatim after it.

The message counter is sent as its low 8 bits and rebuilt from the receiver's
highest counter ``h`` seen on the flow: the unique value congruent to the
residue in ``[h, h + 255]``. The acknowledged counter is rebuilt the same way
against the highest acknowledged counter.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import msglayer
from .datamodel import Path
from .interaction import PATH_LEN, decode_path, encode_path
from .msglayer import MessageHeader

VERBATIM_RULE = 0xFF
PATH_ESCAPE = 0xFF
MAX_RULES = 255
MAX_PATHS = 255
COUNTER_LSB_BITS = 8
WINDOW = (1 << COUNTER_LSB_BITS) - 1
FORMAT_VERSION = 1

# (field, width in bytes), in wire order; ack_counter is optional
FIELDS = (
    ("msg_flags", 1), ("session_id", 2), ("security_flags", 1), ("message_counter", 4),
    ("exchange_flags", 1), ("opcode", 1), ("exchange_id", 2), ("protocol_id", 2),
    ("ack_counter", 4),
)
FIELD_WIDTH = dict(FIELDS)
_INT_FMT = {1: "<B", 2: "<H", 4: "<I"}

EQUALS, MSB, IGNORE = "equals", "msb", "ignore"
ELIDE, SEND_LSB, SEND_VALUE = "elide", "send-lsb", "send-value"


class SchcError(Exception):
    pass


class SchcAmbiguityError(SchcError):
    """The counter lies outside the receiver's reconstruction window."""


class SchcDecodeError(SchcError):
    pass


@dataclass(frozen=True)
class FieldDescriptor:
    field: str
    mo: str  # matching operator
    value: int | None = None
    msb_bits: int = 0
    action: str = ELIDE
    lsb_bits: int = 0

    def __post_init__(self):
        if self.field not in FIELD_WIDTH:
            raise ValueError(f"unknown header field {self.field!r}")
        if self.mo not in (EQUALS, MSB, IGNORE):
            raise ValueError(f"unknown matching operator {self.mo!r}")
        if self.action not in (ELIDE, SEND_LSB, SEND_VALUE):
            raise ValueError(f"unknown action {self.action!r}")
        if self.action == ELIDE and self.mo != EQUALS:
            raise ValueError("only equal-matched fields can be elided")
        if self.action == SEND_LSB and self.lsb_bits % 8:
            raise ValueError("residues must be whole bytes")

    def matches(self, v: int | None) -> bool:
        if self.mo == IGNORE:
            return v is not None
        if self.mo == EQUALS:
            return v == self.value
        if v is None:
            return False
        width = FIELD_WIDTH[self.field] * 8
        return v >> (width - self.msb_bits) == self.value >> (width - self.msb_bits)

    @property
    def residue_bytes(self) -> int:
        if self.action == SEND_VALUE:
            return FIELD_WIDTH[self.field]
        return self.lsb_bits // 8 if self.action == SEND_LSB else 0

    def to_dict(self) -> dict:
        return {"field": self.field, "mo": self.mo, "value": self.value, "msb_bits": self.msb_bits,
                "action": self.action, "lsb_bits": self.lsb_bits}


@dataclass(frozen=True)
class SchcRule:
    rule_id: int
    flow: int
    descriptors: tuple[FieldDescriptor, ...]

    def __post_init__(self):
        if not 0 <= self.rule_id < VERBATIM_RULE:
            raise ValueError(f"rule_id must be in 0..254, got {self.rule_id}")
        names = [d.field for d in self.descriptors]
        if sorted(names) != sorted(FIELD_WIDTH):
            raise ValueError("a rule needs exactly one descriptor per header field")

    def matches(self, h: MessageHeader) -> bool:
        return all(d.matches(getattr(h, d.field)) for d in self.descriptors)

    @property
    def compressed_size(self) -> int:
        return 1 + sum(d.residue_bytes for d in self.descriptors)

    def to_dict(self) -> dict:
        return {"rule_id": self.rule_id, "flow": self.flow,
                "descriptors": [d.to_dict() for d in self.descriptors]}

    @classmethod
    def from_dict(cls, d: dict) -> "SchcRule":
        return cls(d["rule_id"], d["flow"], tuple(FieldDescriptor(**x) for x in d["descriptors"]))


@dataclass(frozen=True)
class SchcContext:
    rules: tuple[SchcRule, ...] = ()
    paths: tuple[Path, ...] = ()

    def __post_init__(self):
        if len(self.rules) > MAX_RULES:
            raise ValueError(f"at most {MAX_RULES} rules")
        if len({r.rule_id for r in self.rules}) != len(self.rules):
            raise ValueError("duplicate rule ids")
        if len(self.paths) > MAX_PATHS - 1:
            raise ValueError(f"at most {MAX_PATHS - 1} registered paths")

    def rule(self, rule_id: int) -> SchcRule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise SchcDecodeError(f"rule {rule_id} not in context")

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION,
                "rules": [r.to_dict() for r in self.rules],
                "paths": [encode_path(p).hex() for p in self.paths]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SchcContext":
        if not isinstance(d, dict):
            raise ValueError("context must be a JSON object")
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported context format {d.get('format_version')!r}")
        return cls(tuple(SchcRule.from_dict(r) for r in d["rules"]),
                   tuple(decode_path(bytes.fromhex(p)) for p in d["paths"]))

    @classmethod
    def from_json(cls, text: str) -> "SchcContext":
        return cls.from_dict(json.loads(text))

    @property
    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class Flow:
    """A priori description of one header stream; everything but the counters is static."""

    session_id: int
    protocol_id: int
    opcodes: frozenset[int]
    msg_flags: int = msglayer.FLAG_RELIABLE
    exchange_flags: int = msglayer.EXCH_INITIATOR
    exchange_id: int = 0
    security_flags: int = msglayer.SUITE_AES_CCM_16

    def __post_init__(self):
        object.__setattr__(self, "opcodes", frozenset(self.opcodes))
        if not self.opcodes:
            raise ValueError("a flow needs at least one opcode")
        if self.msg_flags & msglayer.FLAG_ACK:
            raise ValueError("give msg_flags without the A flag; ack rules are derived")

    @classmethod
    def of(cls, header: MessageHeader, opcodes: Iterable[int] | None = None) -> "Flow":
        return cls(header.session_id, header.protocol_id,
                   frozenset(opcodes) if opcodes is not None else frozenset({header.opcode}),
                   header.msg_flags & ~msglayer.FLAG_ACK, header.exchange_flags,
                   header.exchange_id, header.security_flags)

    @property
    def key(self) -> tuple:
        return (self.session_id, self.protocol_id, self.msg_flags, self.exchange_flags,
                self.exchange_id, self.security_flags)


def _rule_for(rule_id: int, flow_idx: int, flow: Flow, with_ack: bool) -> SchcRule:
    eq = lambda name, v: FieldDescriptor(name, EQUALS, v)  # noqa: E731
    if len(flow.opcodes) == 1:
        opcode = eq("opcode", next(iter(flow.opcodes)))
    else:
        opcode = FieldDescriptor("opcode", IGNORE, action=SEND_VALUE)
    lsb = lambda name: FieldDescriptor(name, MSB, 0, 0, SEND_LSB, COUNTER_LSB_BITS)  # noqa: E731
    flags = flow.msg_flags | (msglayer.FLAG_ACK if with_ack else 0)
    return SchcRule(rule_id, flow_idx, (
        eq("msg_flags", flags),
        eq("session_id", flow.session_id),
        eq("security_flags", flow.security_flags),
        lsb("message_counter"),
        eq("exchange_flags", flow.exchange_flags),
        opcode,
        eq("exchange_id", flow.exchange_id),
        eq("protocol_id", flow.protocol_id),
        lsb("ack_counter") if with_ack else eq("ack_counter", None),
    ))


def build_context(flows: Sequence[Flow | tuple], *, ack_rules: bool = True,
                  paths: Sequence[Path] = ()) -> SchcContext:
    """One rule per flow, plus a companion rule for headers carrying an ACK.

    Tuples are read as ``(session_id, protocol_id, opcodes)``.
    """
    flows = [f if isinstance(f, Flow) else Flow(*f) for f in flows]
    if len(flows) > MAX_RULES:
        raise ValueError(f"at most {MAX_RULES} flows, got {len(flows)}")
    rules = [_rule_for(i, i, f, False) for i, f in enumerate(flows)]
    if ack_rules:
        if 2 * len(flows) > MAX_RULES:
            raise ValueError(f"{len(flows)} flows with ack rules need more than {MAX_RULES} rule ids")
        rules += [_rule_for(len(flows) + i, i, f, True) for i, f in enumerate(flows)]
    return SchcContext(tuple(rules), tuple(paths))


def flows_from_headers(headers: Iterable[MessageHeader]) -> list[Flow]:
    """Group headers into flows by their static fields, collecting opcodes per flow."""
    by_key: dict[tuple, set[int]] = {}
    first: dict[tuple, MessageHeader] = {}
    for h in headers:
        k = Flow.of(h).key
        by_key.setdefault(k, set()).add(h.opcode)
        first.setdefault(k, h)
    return [Flow.of(first[k], ops) for k, ops in by_key.items()]


@dataclass
class SchcState:
    """Per-flow highest counters; one instance per direction at each end."""

    highest: dict[int, int] = field(default_factory=dict)
    highest_ack: dict[int, int] = field(default_factory=dict)
    ambiguities: int = 0

    def copy(self) -> "SchcState":
        return SchcState(dict(self.highest), dict(self.highest_ack), self.ambiguities)


def _reconstruct(residue: int, highest: int) -> int:
    return highest + ((residue - highest) & WINDOW)


def _in_window(value: int, highest: int) -> bool:
    return highest <= value <= highest + WINDOW


def compress(ctx: SchcContext, header: MessageHeader, state: SchcState | None = None) -> bytes:
    """Compress with the first matching rule, or verbatim under rule 0xFF.

    With a ``state``, raises :class:`SchcAmbiguityError` when a counter falls
    outside the window the receiver can rebuild; the state is then unchanged.
    Without one the window is taken to start at 0.
    """
    for rule in ctx.rules:
        if not rule.matches(header):
            continue
        hi = state.highest.get(rule.flow, 0) if state else 0
        hi_ack = state.highest_ack.get(rule.flow, 0) if state else 0
        out = bytearray([rule.rule_id])
        for d in rule.descriptors:
            v = getattr(header, d.field)
            if d.action == SEND_LSB:
                ref = hi if d.field == "message_counter" else hi_ack
                if not _in_window(v, ref):
                    raise SchcAmbiguityError(
                        f"{d.field}={v} outside [{ref}, {ref + WINDOW}] for flow {rule.flow}")
                out += (v & ((1 << d.lsb_bits) - 1)).to_bytes(d.lsb_bits // 8, "little")
            elif d.action == SEND_VALUE:
                out += struct.pack(_INT_FMT[FIELD_WIDTH[d.field]], v)
        if state is not None:
            _advance(state, rule.flow, header)
        return bytes(out)
    return bytes([VERBATIM_RULE]) + header.encode()


def _advance(state: SchcState, flow: int, h: MessageHeader) -> None:
    state.highest[flow] = max(state.highest.get(flow, 0), h.message_counter)
    if h.ack_counter is not None:
        state.highest_ack[flow] = max(state.highest_ack.get(flow, 0), h.ack_counter)


def decompress(ctx: SchcContext, data: bytes, state: SchcState | None = None
               ) -> tuple[MessageHeader, bytes]:
    """Rebuild the header; returns it with the bytes that follow the compressed header."""
    if not data:
        raise SchcDecodeError("empty input")
    if data[0] == VERBATIM_RULE:
        try:
            h, rest = MessageHeader.decode(data[1:])
        except msglayer.MalformedMessageError as exc:
            raise SchcDecodeError(str(exc)) from exc
        if state is not None:
            for rule in ctx.rules:
                if rule.matches(h):
                    _advance(state, rule.flow, h)
                    break
        return h, rest
    rule = ctx.rule(data[0])
    pos = 1
    hi = state.highest.get(rule.flow, 0) if state else 0
    hi_ack = state.highest_ack.get(rule.flow, 0) if state else 0
    values: dict[str, int | None] = {}
    for d in rule.descriptors:
        n = d.residue_bytes
        if pos + n > len(data):
            raise SchcDecodeError("truncated compressed header")
        chunk = data[pos:pos + n]
        pos += n
        if d.action == ELIDE:
            values[d.field] = d.value
        elif d.action == SEND_VALUE:
            values[d.field] = struct.unpack(_INT_FMT[n], chunk)[0]
        else:
            ref = hi if d.field == "message_counter" else hi_ack
            values[d.field] = _reconstruct(int.from_bytes(chunk, "little"), ref)
    try:
        h = MessageHeader(**values)
    except ValueError as exc:
        raise SchcDecodeError(str(exc)) from exc
    if state is not None:
        _advance(state, rule.flow, h)
    return h, bytes(data[pos:])


class SchcCompressor:
    """Sender model: falls back to the verbatim form on ambiguity and counts it."""

    def __init__(self, ctx: SchcContext, state: SchcState | None = None):
        self.ctx = ctx
        self.state = state or SchcState()

    def compress(self, header: MessageHeader) -> bytes:
        try:
            return compress(self.ctx, header, self.state)
        except SchcAmbiguityError:
            self.state.ambiguities += 1
            # mirror the receiver, which advances on verbatim headers that match a rule
            for rule in self.ctx.rules:
                if rule.matches(header):
                    _advance(self.state, rule.flow, header)
                    break
            return bytes([VERBATIM_RULE]) + header.encode()


def compress_path(ctx: SchcContext, path: Path) -> bytes:
    try:
        return bytes([ctx.paths.index(path)])
    except ValueError:
        return bytes([PATH_ESCAPE]) + encode_path(path)


def decompress_path(ctx: SchcContext, data: bytes) -> tuple[Path, int]:
    """Returns the path and the number of bytes consumed."""
    if not data:
        raise SchcDecodeError("empty input")
    if data[0] == PATH_ESCAPE:
        if len(data) < 1 + PATH_LEN:
            raise SchcDecodeError("truncated escaped path")
        return decode_path(bytes(data[1:1 + PATH_LEN])), 1 + PATH_LEN
    if data[0] >= len(ctx.paths):
        raise SchcDecodeError(f"path index {data[0]} not in context")
    return ctx.paths[data[0]], 1
