"""Secure message framing, session establishment and the Message Reliability Protocol.

Wire layout of the header (little-endian, fixed widths)::

    msg_flags(1) session_id(2) security_flags(1) message_counter(4)
    exchange_flags(1) opcode(1) exchange_id(2) protocol_id(2) [ack_counter(4)]

14 bytes, or 18 when the A flag announces an ``ack_counter``. Secured messages
carry the AES-CCM ciphertext of the payload followed by a 16-byte MIC; the
nonce is ``security_flags || message_counter || source node id`` (13 bytes)
and the associated data is the plaintext header.

The session handshake here is a stand-in that derives a key from the fabric's
pre-shared secret and two random nonces. It is not PASE/CASE.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESCCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import netsim
from .netsim import NS_PER_MS, Pending

log = logging.getLogger(__name__)

# msg_flags
FLAG_RELIABLE = 0x01
FLAG_ACK = 0x02
FLAG_CONTROL = 0x04
MSG_FLAGS_MASK = 0x07

# exchange_flags
EXCH_INITIATOR = 0x01
EXCH_MORE_CHUNKS = 0x02
EXCH_FLAGS_MASK = 0x03

SUITE_AES_CCM_16 = 0

PROTOCOL_SECURE_CHANNEL = 0
PROTOCOL_INTERACTION = 1

OP_STANDALONE_ACK = 0x10
OP_SESSION_REQUEST = 0x20
OP_SESSION_RESPONSE = 0x21

HEADER_LEN = 14
HEADER_LEN_ACK = 18
MIC_LEN = 16
KEY_LEN = 16
NONCE_LEN = 13
RANDOM_LEN = 16
UNSECURED_SESSION = 0

_HDR = struct.Struct("<BHBIBBHH")
_ACK = struct.Struct("<I")
_NONCE = struct.Struct("<BIQ")


class MessageError(Exception):
    pass


class MalformedMessageError(MessageError):
    pass


class IntegrityError(MessageError):
    pass


class UsageError(MessageError):
    pass


class DeliveryFailed(MessageError):
    """A reliable message exhausted its retransmissions without an ACK."""


@dataclass(frozen=True)
class MessageHeader:
    session_id: int
    message_counter: int
    opcode: int
    exchange_id: int
    protocol_id: int = PROTOCOL_INTERACTION
    msg_flags: int = 0
    security_flags: int = SUITE_AES_CCM_16
    exchange_flags: int = 0
    ack_counter: int | None = None

    def __post_init__(self):
        widths = {"session_id": 16, "message_counter": 32, "opcode": 8, "exchange_id": 16,
                  "protocol_id": 16, "msg_flags": 8, "security_flags": 8, "exchange_flags": 8}
        for name, bits in widths.items():
            v = getattr(self, name)
            if not 0 <= v < (1 << bits):
                raise ValueError(f"{name}={v} does not fit {bits} bits")
        if self.msg_flags & ~MSG_FLAGS_MASK or self.exchange_flags & ~EXCH_FLAGS_MASK:
            raise ValueError("reserved flag bits must be zero")
        has_ack = bool(self.msg_flags & FLAG_ACK)
        if has_ack != (self.ack_counter is not None):
            raise ValueError("A flag must be set iff ack_counter is present")
        if self.ack_counter is not None and not 0 <= self.ack_counter < (1 << 32):
            raise ValueError("ack_counter does not fit 32 bits")

    @property
    def reliable(self) -> bool:
        return bool(self.msg_flags & FLAG_RELIABLE)

    @property
    def has_ack(self) -> bool:
        return self.ack_counter is not None

    @property
    def is_control(self) -> bool:
        return bool(self.msg_flags & FLAG_CONTROL)

    @property
    def initiator(self) -> bool:
        return bool(self.exchange_flags & EXCH_INITIATOR)

    @property
    def more_chunks(self) -> bool:
        return bool(self.exchange_flags & EXCH_MORE_CHUNKS)

    @property
    def length(self) -> int:
        return HEADER_LEN_ACK if self.has_ack else HEADER_LEN

    def with_ack(self, ack_counter: int | None) -> "MessageHeader":
        flags = self.msg_flags & ~FLAG_ACK
        if ack_counter is not None:
            flags |= FLAG_ACK
        return replace(self, msg_flags=flags, ack_counter=ack_counter)

    def encode(self) -> bytes:
        out = _HDR.pack(self.msg_flags, self.session_id, self.security_flags,
                        self.message_counter, self.exchange_flags, self.opcode,
                        self.exchange_id, self.protocol_id)
        if self.ack_counter is not None:
            out += _ACK.pack(self.ack_counter)
        return out

    @classmethod
    def decode(cls, data: bytes) -> tuple["MessageHeader", bytes]:
        """Parse a header; returns it with the remaining (payload + MIC) bytes."""
        if len(data) < HEADER_LEN:
            raise MalformedMessageError(f"truncated header: {len(data)} < {HEADER_LEN} bytes")
        fields = _HDR.unpack_from(data)
        msg_flags, exch_flags = fields[0], fields[4]
        if msg_flags & ~MSG_FLAGS_MASK or exch_flags & ~EXCH_FLAGS_MASK:
            raise MalformedMessageError("reserved flag bits set")
        ack = None
        end = HEADER_LEN
        if msg_flags & FLAG_ACK:
            if len(data) < HEADER_LEN_ACK:
                raise MalformedMessageError("A flag set but ack_counter truncated")
            (ack,) = _ACK.unpack_from(data, HEADER_LEN)
            end = HEADER_LEN_ACK
        hdr = cls(session_id=fields[1], message_counter=fields[3], opcode=fields[5],
                  exchange_id=fields[6], protocol_id=fields[7], msg_flags=msg_flags,
                  security_flags=fields[2], exchange_flags=exch_flags, ack_counter=ack)
        return hdr, bytes(data[end:])

    def describe(self) -> str:
        bits = [n for n, f in (("R", FLAG_RELIABLE), ("A", FLAG_ACK), ("C", FLAG_CONTROL))
                if self.msg_flags & f]
        return f"{'|'.join(bits) or '-'};p={self.protocol_id};op={self.opcode:#04x}"


def encode(header: MessageHeader, payload: bytes) -> bytes:
    return header.encode() + bytes(payload)


def decode(data: bytes) -> tuple[MessageHeader, bytes]:
    return MessageHeader.decode(data)


@dataclass(frozen=True)
class SecureMessage:
    header: MessageHeader
    ciphertext: bytes
    mic: bytes = b""

    def to_bytes(self) -> bytes:
        return self.header.encode() + self.ciphertext + self.mic

    @property
    def wire_length(self) -> int:
        return self.header.length + len(self.ciphertext) + len(self.mic)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SecureMessage":
        hdr, rest = MessageHeader.decode(data)
        if hdr.is_control:
            return cls(hdr, rest, b"")
        if len(rest) < MIC_LEN:
            raise MalformedMessageError("secured message shorter than its MIC")
        return cls(hdr, rest[:-MIC_LEN], rest[-MIC_LEN:])


# -- dedup & sessions ------------------------------------------------------

class DedupWindow:
    """Highest counter seen plus a 64-entry bitmap of the counters just below it."""

    SIZE = 64

    def __init__(self):
        self.max_seen: int | None = None
        self.bitmap = 0  # bit i set => counter (max_seen - 1 - i) seen

    def accept(self, counter: int) -> bool:
        """Mark ``counter`` as seen; False if it was seen before (or is too old to tell)."""
        if self.max_seen is None:
            self.max_seen = counter
            return True
        if counter > self.max_seen:
            shift = counter - self.max_seen
            if shift > self.SIZE:
                self.bitmap = 0
            else:
                self.bitmap = ((self.bitmap << shift) | (1 << (shift - 1))) & ((1 << self.SIZE) - 1)
            self.max_seen = counter
            return True
        if counter == self.max_seen:
            return False
        offset = self.max_seen - 1 - counter
        if offset >= self.SIZE:
            return False
        bit = 1 << offset
        if self.bitmap & bit:
            return False
        self.bitmap |= bit
        return True


@dataclass(frozen=True)
class MrpConfig:
    base_retry_interval_ms: float = 300.0
    backoff_factor: float = 2.0
    max_retransmissions: int = 4
    ack_defer_ms: float = 200.0

    def __post_init__(self):
        if self.base_retry_interval_ms <= 0 or self.backoff_factor <= 0 or self.ack_defer_ms <= 0:
            raise ValueError("MRP intervals and backoff factor must be positive")
        if self.max_retransmissions < 0:
            raise ValueError("max_retransmissions must be >= 0")

    def retry_interval_ns(self, k: int) -> int:
        """Wait after the k-th transmission (k = 0 for the original)."""
        return round(self.base_retry_interval_ms * self.backoff_factor ** k * NS_PER_MS)

    @property
    def ack_defer_ns(self) -> int:
        return round(self.ack_defer_ms * NS_PER_MS)

    def retransmission_offsets_ns(self) -> list[int]:
        """Send times of each retransmission relative to the original send."""
        out, t = [], 0
        for k in range(self.max_retransmissions):
            t += self.retry_interval_ns(k)
            out.append(t)
        return out

    def failure_offset_ns(self) -> int:
        return sum(self.retry_interval_ns(k) for k in range(self.max_retransmissions + 1))


@dataclass
class Session:
    id: int
    key: bytes | None
    local_node: int
    peer: int
    mrp: MrpConfig = field(default_factory=MrpConfig)
    tx_counter: int = 1
    rx_window: DedupWindow = field(default_factory=DedupWindow)
    fabric_id: int | None = None
    # pending deferred ACK: (counter, timer)
    pending_ack: tuple[int, netsim.Timer | None] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.key is not None and len(self.key) != KEY_LEN:
            raise ValueError("session key must be exactly 16 bytes")

    @property
    def secure(self) -> bool:
        return self.key is not None

    @property
    def ref(self) -> tuple[int, int]:
        return (self.peer, self.id)

    def next_counter(self) -> int:
        c = self.tx_counter
        self.tx_counter = (c + 1) & 0xFFFF_FFFF
        return c


def derive_session_key(shared_secret: bytes, random_a: bytes, random_b: bytes,
                       session_id: int) -> bytes:
    """HKDF-SHA256 over the fabric secret, salted with the handshake transcript."""
    salt = bytes(random_a) + bytes(random_b) + struct.pack("<H", session_id)
    return HKDF(algorithm=hashes.SHA256(), length=KEY_LEN, salt=salt,
                info=b"mattersim session key").derive(bytes(shared_secret))


def session_pair(shared_secret: bytes, node_a: int, node_b: int, session_id: int,
                 random_a: bytes, random_b: bytes, mrp: MrpConfig = MrpConfig()
                 ) -> tuple[Session, Session]:
    """Both ends of a session derived from the same handshake transcript."""
    key = derive_session_key(shared_secret, random_a, random_b, session_id)
    return (Session(session_id, key, node_a, node_b, mrp),
            Session(session_id, key, node_b, node_a, mrp))


def _nonce(header: MessageHeader, source_node: int) -> bytes:
    return _NONCE.pack(header.security_flags, header.message_counter, source_node)


def protect(session: Session, header: MessageHeader, plaintext: bytes) -> SecureMessage:
    if not session.secure:
        raise UsageError("cannot protect on an unsecured session")
    if header.security_flags != SUITE_AES_CCM_16:
        raise UsageError(f"unsupported security suite {header.security_flags}")
    if header.is_control:
        raise UsageError("control messages are not encrypted")
    sealed = AESCCM(session.key, tag_length=MIC_LEN).encrypt(
        _nonce(header, session.local_node), bytes(plaintext), header.encode())
    return SecureMessage(header, sealed[:-MIC_LEN], sealed[-MIC_LEN:])


def unprotect(session: Session, msg: SecureMessage) -> bytes:
    h = msg.header
    if h.is_control or h.session_id != session.id or h.security_flags != SUITE_AES_CCM_16:
        raise IntegrityError("header does not belong to this secure session")
    if len(msg.mic) != MIC_LEN:
        raise IntegrityError("missing MIC")
    try:
        return AESCCM(session.key, tag_length=MIC_LEN).decrypt(
            _nonce(h, session.peer), msg.ciphertext + msg.mic, h.encode())
    except InvalidTag as exc:
        raise IntegrityError("MIC check failed") from exc


def open_wire(session: Session, data: bytes) -> tuple[MessageHeader, bytes]:
    """Decode and authenticate; every failure surfaces as IntegrityError."""
    try:
        msg = SecureMessage.from_bytes(data)
    except (MalformedMessageError, ValueError) as exc:
        raise IntegrityError(f"undecodable message: {exc}") from exc
    return msg.header, unprotect(session, msg)


# -- message layer endpoint ------------------------------------------------

class SendHandle(Pending):
    """Resolves with ``"acked"`` (reliable) or ``"sent"`` (unreliable); fails with DeliveryFailed."""

    def __init__(self, counter: int, label: str = ""):
        super().__init__(label)
        self.counter = counter
        self.transmissions = 0
        self.send_times: list[int] = []

    @property
    def status(self) -> str:
        if self.state == "pending":
            return "pending"
        return "failed" if self.failed else self.value


@dataclass
class _Retrans:
    session: Session
    wire: bytes
    header: MessageHeader
    handle: SendHandle
    k: int = 0
    timer: netsim.Timer | None = None


MessageHandler = Callable[[Session, MessageHeader, bytes], None]


class MessageLayer:
    """One node's Message Layer, driven by a :class:`netsim.Simulator`."""

    def __init__(self, sim: netsim.Simulator, node_id: int, shared_secret: bytes,
                 mrp: MrpConfig = MrpConfig(), transport: str = netsim.UNRELIABLE,
                 fabric_id: int | None = None):
        self.sim = sim
        self.node_id = node_id
        self.shared_secret = bytes(shared_secret)
        self.mrp = mrp
        self.transport = transport
        self.fabric_id = fabric_id
        self.sessions: dict[tuple[int, int], Session] = {}
        self._by_peer: dict[int, Session] = {}
        self._unsecured: dict[int, Session] = {}
        self._unsecured_counter = 1
        self._retrans: dict[tuple[int, int, int], _Retrans] = {}
        self._handshakes: dict[int, tuple[bytes, int, Pending]] = {}
        self.on_message: MessageHandler | None = None
        self.delivered: list[tuple[int, int, int]] = []  # (peer, session, counter) for audits
        self.keep_delivery_log = False
        sim.attach(node_id, self._on_datagram)

    # stats
    def _count(self, key: str, n: int = 1) -> None:
        self.sim.stats.count(self.node_id, key, n)

    @property
    def mrp_enabled(self) -> bool:
        return self.transport == netsim.UNRELIABLE

    # sessions
    def session_for(self, peer: int) -> Session | None:
        return self._by_peer.get(peer)

    def _unsecured_session(self, peer: int) -> Session:
        s = self._unsecured.get(peer)
        if s is None:
            s = Session(UNSECURED_SESSION, None, self.node_id, peer, self.mrp)
            self._unsecured[peer] = s
        return s

    def _alloc_session_id(self) -> int:
        used = {sid for (_, sid) in self.sessions}
        sid = 1
        while sid in used:
            sid += 1
        return sid

    def install_session(self, session: Session) -> Session:
        self.sessions[session.ref] = session
        self._by_peer[session.peer] = session
        return session

    def establish_session(self, peer: int) -> Pending:
        """Run the handshake with ``peer``; the result is the local :class:`Session`."""
        existing = self._by_peer.get(peer)
        if existing is not None:
            p = Pending(f"session {self.node_id}->{peer}")
            p.resolve(existing)
            return p
        if peer in self._handshakes:
            return self._handshakes[peer][2]
        rand_a = self.sim.rng.bytes(RANDOM_LEN)
        sid = self._alloc_session_id()
        pending = Pending(f"session {self.node_id}->{peer}")
        self._handshakes[peer] = (rand_a, sid, pending)
        self._count("session_requests")
        handle = self._send_control(peer, OP_SESSION_REQUEST, rand_a + struct.pack("<H", sid),
                                    exchange_id=sid, initiator=True)

        def on_done(h: Pending) -> None:
            if h.failed and not pending.done:
                self._handshakes.pop(peer, None)
                pending.fail(DeliveryFailed(f"session request to {peer} not acknowledged"))

        handle.add_done_callback(on_done)
        return pending

    def _on_session_request(self, peer: int, header: MessageHeader, payload: bytes) -> None:
        if len(payload) != RANDOM_LEN + 2:
            self._count("malformed")
            return
        rand_a = payload[:RANDOM_LEN]
        (sid,) = struct.unpack("<H", payload[RANDOM_LEN:])
        if sid == UNSECURED_SESSION or any(s == sid for (_, s) in self.sessions):
            sid = self._alloc_session_id()
        rand_b = self.sim.rng.bytes(RANDOM_LEN)
        key = derive_session_key(self.shared_secret, rand_a, rand_b, sid)
        self.install_session(Session(sid, key, self.node_id, peer, self.mrp, fabric_id=self.fabric_id))
        self._count("sessions_established")
        self._send_control(peer, OP_SESSION_RESPONSE, rand_b + struct.pack("<H", sid),
                           exchange_id=header.exchange_id, initiator=False)

    def _on_session_response(self, peer: int, header: MessageHeader, payload: bytes) -> None:
        hs = self._handshakes.pop(peer, None)
        if hs is None or len(payload) != RANDOM_LEN + 2:
            self._count("malformed")
            return
        rand_a, _, pending = hs
        rand_b = payload[:RANDOM_LEN]
        (sid,) = struct.unpack("<H", payload[RANDOM_LEN:])
        key = derive_session_key(self.shared_secret, rand_a, rand_b, sid)
        session = self.install_session(Session(sid, key, self.node_id, peer, self.mrp,
                                               fabric_id=self.fabric_id))
        self._count("sessions_established")
        pending.resolve(session)

    # sending
    def _send_control(self, peer: int, opcode: int, payload: bytes, *, exchange_id: int,
                      initiator: bool) -> SendHandle:
        s = self._unsecured_session(peer)
        counter = self._unsecured_counter
        self._unsecured_counter += 1
        reliable = self.mrp_enabled
        flags = FLAG_CONTROL | (FLAG_RELIABLE if reliable else 0)
        hdr = MessageHeader(UNSECURED_SESSION, counter, opcode, exchange_id,
                            PROTOCOL_SECURE_CHANNEL, flags,
                            exchange_flags=EXCH_INITIATOR if initiator else 0)
        return self._emit(s, hdr, payload, reliable)

    def send(self, session: Session, opcode: int, payload: bytes = b"", *, exchange_id: int,
             initiator: bool, protocol_id: int = PROTOCOL_INTERACTION,
             reliable: bool | None = None, more_chunks: bool = False) -> SendHandle:
        """Send an application message. ``reliable=None`` means "MRP when available"."""
        if reliable is None:
            reliable = self.mrp_enabled
        if reliable and not self.mrp_enabled:
            raise UsageError("MRP is bypassed over the reliable-stream transport")
        flags = FLAG_RELIABLE if reliable else 0
        exch = (EXCH_INITIATOR if initiator else 0) | (EXCH_MORE_CHUNKS if more_chunks else 0)
        hdr = MessageHeader(session.id, session.next_counter(), opcode, exchange_id,
                            protocol_id, flags, exchange_flags=exch)
        return self._emit(session, hdr, payload, reliable)

    def mrp_send(self, session: Session, opcode: int, payload: bytes, reliable: bool, **kw) -> SendHandle:
        return self.send(session, opcode, payload, reliable=reliable, **kw)

    def _emit(self, session: Session, hdr: MessageHeader, payload: bytes, reliable: bool) -> SendHandle:
        if session.pending_ack is not None and hdr.opcode != OP_STANDALONE_ACK:
            ack, timer = session.pending_ack
            if timer is not None:
                timer.cancel()
            session.pending_ack = None
            hdr = hdr.with_ack(ack)
            self._count("piggybacked_acks")
        if session.secure:
            wire = protect(session, hdr, payload).to_bytes()
            mic = MIC_LEN
        else:
            wire = encode(hdr, payload)
            mic = 0
        handle = SendHandle(hdr.message_counter, f"msg {self.node_id}->{session.peer} #{hdr.message_counter}")
        self._count("msg_tx")
        self.sim.log("msg_tx", self.node_id, session.peer, len(wire), "", hdr.describe(),
                     f"hdr={hdr.encode().hex()};payload={len(payload)};s={session.id}")
        self._put(session, wire, hdr, mic, handle)
        if handle.done:
            return handle
        if reliable:
            entry = _Retrans(session, wire, hdr, handle)
            self._retrans[(session.peer, session.id, hdr.message_counter)] = entry
            entry.timer = self.sim.schedule(session.mrp.retry_interval_ns(0), self._on_retry_timeout, entry)
        else:
            handle.resolve("sent")
        return handle

    def _put(self, session: Session, wire: bytes, hdr: MessageHeader, mic: int, handle: SendHandle) -> None:
        handle.transmissions += 1
        handle.send_times.append(self.sim.now)
        try:
            self.sim.send_datagram(self.node_id, session.peer, wire, transport=self.transport,
                                   header_len=hdr.length, mic_len=mic, flags=hdr.describe())
        except netsim.NoRouteError as exc:
            self._count("no_route")
            handle.fail(DeliveryFailed(str(exc)))

    def _on_retry_timeout(self, entry: _Retrans) -> None:
        key = (entry.session.peer, entry.session.id, entry.header.message_counter)
        if self._retrans.get(key) is not entry or entry.handle.done:
            self._retrans.pop(key, None)
            return
        if entry.k >= entry.session.mrp.max_retransmissions:
            del self._retrans[key]
            self._count("mrp_failures")
            self.sim.log("mrp_fail", self.node_id, entry.session.peer, 0, "", entry.header.describe(),
                         f"counter={entry.header.message_counter}")
            entry.handle.fail(DeliveryFailed(
                f"no ACK for counter {entry.header.message_counter} after "
                f"{entry.handle.transmissions} transmissions"))
            return
        entry.k += 1
        self._count("retransmissions")
        self.sim.log("retransmit", self.node_id, entry.session.peer, len(entry.wire), "",
                     entry.header.describe(), f"counter={entry.header.message_counter};k={entry.k}")
        self._put(entry.session, entry.wire, entry.header,
                  0 if entry.header.is_control else MIC_LEN, entry.handle)
        entry.timer = self.sim.schedule(entry.session.mrp.retry_interval_ns(entry.k),
                                        self._on_retry_timeout, entry)

    # acks
    def _send_standalone_ack(self, session: Session, ack_counter: int) -> None:
        if session.secure:
            hdr = MessageHeader(session.id, session.next_counter(), OP_STANDALONE_ACK, 0,
                                PROTOCOL_SECURE_CHANNEL, FLAG_ACK, ack_counter=ack_counter)
        else:
            counter = self._unsecured_counter
            self._unsecured_counter += 1
            hdr = MessageHeader(UNSECURED_SESSION, counter, OP_STANDALONE_ACK, 0,
                                PROTOCOL_SECURE_CHANNEL, FLAG_ACK | FLAG_CONTROL,
                                ack_counter=ack_counter)
        self._count("standalone_acks")
        self._emit(session, hdr, b"", reliable=False)

    def _flush_ack(self, session: Session) -> None:
        if session.pending_ack is None:
            return
        ack, timer = session.pending_ack
        if timer is not None:
            timer.cancel()
        session.pending_ack = None
        self._send_standalone_ack(session, ack)

    def _schedule_ack(self, session: Session, counter: int, *, immediate: bool) -> None:
        if session.pending_ack is not None:
            if session.pending_ack[0] == counter:
                if immediate:
                    self._flush_ack(session)
                return
            self._flush_ack(session)
        if immediate:
            self._send_standalone_ack(session, counter)
            return
        timer = self.sim.schedule(session.mrp.ack_defer_ns, self._flush_ack, session)
        session.pending_ack = (counter, timer)

    def _on_ack(self, session: Session, ack_counter: int) -> None:
        entry = self._retrans.pop((session.peer, session.id, ack_counter), None)
        if entry is None:
            return
        if entry.timer is not None:
            entry.timer.cancel()
        self._count("acks_received")
        entry.handle.resolve("acked")

    # receiving
    def _on_datagram(self, dg: netsim.Datagram) -> None:
        self.receive(dg.src.node, dg.payload)

    def receive(self, peer: int, data: bytes) -> str:
        """Process one inbound message; returns the disposition for tests and tracing."""
        try:
            msg = SecureMessage.from_bytes(data)
        except MalformedMessageError:
            self._count("malformed")
            return "malformed"
        hdr = msg.header
        if hdr.is_control:
            if hdr.session_id != UNSECURED_SESSION:
                self._count("malformed")
                return "malformed"
            session = self._unsecured_session(peer)
            payload = msg.ciphertext
        else:
            session = self.sessions.get((peer, hdr.session_id))
            if session is None:
                self._count("unknown_session")
                return "unknown-session"
            try:
                payload = unprotect(session, msg)
            except IntegrityError:
                self._count("integrity_failures")
                self.sim.log("integrity_fail", peer, self.node_id, len(data), "", hdr.describe())
                return "integrity-failure"

        self._count("msg_rx")
        if hdr.has_ack:
            self._on_ack(session, hdr.ack_counter)
        fresh = session.rx_window.accept(hdr.message_counter)
        if not fresh:
            self._count("duplicates")
            self.sim.log("duplicate", peer, self.node_id, len(data), "", hdr.describe(),
                         f"counter={hdr.message_counter}")
            if hdr.reliable and self.mrp_enabled:
                self._schedule_ack(session, hdr.message_counter, immediate=True)
            return "duplicate-suppressed"
        if hdr.reliable and self.mrp_enabled:
            # a chunk with more to follow gets no application reply to ride on
            self._schedule_ack(session, hdr.message_counter, immediate=hdr.more_chunks)

        if hdr.protocol_id == PROTOCOL_SECURE_CHANNEL:
            if hdr.opcode == OP_SESSION_REQUEST and hdr.is_control:
                self._on_session_request(peer, hdr, payload)
            elif hdr.opcode == OP_SESSION_RESPONSE and hdr.is_control:
                self._on_session_response(peer, hdr, payload)
            return "deliver"
        self._count("delivered")
        if self.keep_delivery_log:
            self.delivered.append((peer, session.id, hdr.message_counter))
        self.sim.log("msg_rx", peer, self.node_id, len(data), "", hdr.describe(),
                     f"hdr={hdr.encode().hex()};payload={len(payload)};s={session.id}")
        if self.on_message is not None:
            self.on_message(session, hdr, payload)
        return "deliver"
