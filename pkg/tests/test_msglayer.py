import hashlib
import hmac
import json
import struct
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.ciphers.aead import AESCCM
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SECRET, make_net
from mattersim import encap, msglayer, netsim
from mattersim.msglayer import MessageHeader, MrpConfig, SecureMessage

VECTORS = json.loads((Path(__file__).parent / "data" / "header_vectors.json").read_text())
MS = netsim.NS_PER_MS


def headers(ack=st.one_of(st.none(), st.integers(0, 2**32 - 1))):
    return st.builds(
        _hdr, ack,
        session_id=st.integers(0, 0xFFFF), message_counter=st.integers(0, 2**32 - 1),
        opcode=st.integers(0, 255), exchange_id=st.integers(0, 0xFFFF), protocol_id=st.integers(0, 0xFFFF),
        msg_flags=st.sampled_from([0, 1, 4, 5]), exchange_flags=st.integers(0, 3))


def _hdr(ack, msg_flags, **kw):
    return MessageHeader(msg_flags=msg_flags | (msglayer.FLAG_ACK if ack is not None else 0),
                         ack_counter=ack, **kw)


def keyed_pair(sid=5):
    return msglayer.session_pair(SECRET, 1, 2, sid, b"A" * 16, b"B" * 16)


@pytest.mark.parametrize("vec", VECTORS, ids=[v["name"] for v in VECTORS])
def test_golden_header_bytes(vec):
    h = MessageHeader(**vec["fields"])
    assert h.encode().hex() == vec["hex"]
    decoded, rest = MessageHeader.decode(bytes.fromhex(vec["hex"]) + b"tail")
    assert decoded == h and rest == b"tail"


@given(headers(), st.binary(max_size=64))
def test_encode_decode_roundtrip(h, payload):
    wire = msglayer.encode(h, payload)
    assert len(wire) - len(payload) == h.length in (14, 18)
    assert msglayer.decode(wire) == (h, payload)


@pytest.mark.parametrize("n", [0, 1, 13])
def test_truncated_header_is_malformed(n):
    with pytest.raises(msglayer.MalformedMessageError):
        MessageHeader.decode(bytes(n))


def test_ack_flag_without_counter_bytes_is_malformed():
    with pytest.raises(msglayer.MalformedMessageError):
        MessageHeader.decode(bytes([2]) + bytes(13))


def test_reserved_bits_rejected():
    with pytest.raises(msglayer.MalformedMessageError):
        MessageHeader.decode(bytes([0x80]) + bytes(13))
    with pytest.raises(ValueError):
        MessageHeader(0, 1, 0, 0, msg_flags=0x10)
    with pytest.raises(ValueError):
        MessageHeader(0, 1, 0, 0, msg_flags=msglayer.FLAG_ACK)
    with pytest.raises(ValueError):
        MessageHeader(0, 2**32, 0, 0)


def test_secured_wire_sizes():
    a, _ = keyed_pair()
    assert len(msglayer.protect(a, MessageHeader(5, 1, 8, 1), b"").to_bytes()) == 30
    assert len(msglayer.protect(a, MessageHeader(5, 1, 8, 1, msg_flags=2, ack_counter=1), b"").to_bytes()) == 34


def _hkdf(secret, salt, info, n=16):
    prk = hmac.new(salt, secret, hashlib.sha256).digest()
    return hmac.new(prk, info + b"\x01", hashlib.sha256).digest()[:n]


def test_key_derivation_matches_hkdf_oracle():
    ra, rb, sid = bytes(range(16)), bytes(range(16, 32)), 0x0102
    expect = _hkdf(SECRET, ra + rb + struct.pack("<H", sid), b"mattersim session key")
    assert msglayer.derive_session_key(SECRET, ra, rb, sid) == expect


def test_keys_identical_per_transcript_and_differ_otherwise():
    a, b = keyed_pair()
    assert a.key == b.key and len(a.key) == 16
    other = msglayer.derive_session_key(SECRET, b"C" * 16, b"B" * 16, 5)
    assert other != a.key


def test_ciphertext_matches_independent_aesccm():
    a, _ = keyed_pair()
    h = MessageHeader(5, 0x01020304, 8, 1)
    msg = msglayer.protect(a, h, b"hello matter")
    nonce = bytes([0]) + struct.pack("<I", 0x01020304) + struct.pack("<Q", 1)
    sealed = AESCCM(a.key, tag_length=16).encrypt(nonce, b"hello matter", h.encode())
    assert msg.ciphertext + msg.mic == sealed
    assert len(msg.mic) == 16 and len(msg.ciphertext) == 12


@settings(max_examples=300)
@given(st.binary(max_size=200), st.integers(1, 2**32 - 1))
def test_protect_roundtrip_and_size(payload, counter):
    a, b = keyed_pair()
    h = MessageHeader(5, counter, 8, 1)
    wire = msglayer.protect(a, h, payload).to_bytes()
    assert len(wire) == len(payload) + h.length + 16
    assert msglayer.unprotect(b, SecureMessage.from_bytes(wire)) == payload


@given(st.binary(min_size=1, max_size=60), st.data())
def test_single_bit_flip_detected(payload, data):
    a, b = keyed_pair()
    wire = bytearray(msglayer.protect(a, MessageHeader(5, 9, 8, 1), payload).to_bytes())
    bit = data.draw(st.integers(0, len(wire) * 8 - 1))
    wire[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(msglayer.IntegrityError):
        msglayer.open_wire(b, bytes(wire))


def test_control_message_has_no_mic():
    h = MessageHeader(0, 1, msglayer.OP_SESSION_REQUEST, 1, 0, msglayer.FLAG_CONTROL)
    msg = SecureMessage.from_bytes(msglayer.encode(h, b"xyz"))
    assert msg.mic == b"" and msg.ciphertext == b"xyz"


def test_dedup_window():
    w = msglayer.DedupWindow()
    assert w.accept(10) and not w.accept(10)
    assert w.accept(12) and w.accept(11) and not w.accept(11)
    assert w.accept(100)
    assert not w.accept(100 - 65)  # below the window: treated as seen
    assert w.accept(100 - 64) and not w.accept(100 - 64)


@given(st.lists(st.integers(0, 300), max_size=200))
def test_dedup_never_accepts_twice(counters):
    w = msglayer.DedupWindow()
    accepted = [c for c in counters if w.accept(c)]
    assert len(accepted) == len(set(accepted))


def test_mrp_config_schedule():
    m = MrpConfig()
    assert [m.retry_interval_ns(k) // MS for k in range(4)] == [300, 600, 1200, 2400]
    assert [t // MS for t in m.retransmission_offsets_ns()] == [300, 900, 2100, 4500]
    with pytest.raises(ValueError):
        MrpConfig(base_retry_interval_ms=0)
    with pytest.raises(ValueError):
        MrpConfig(max_retransmissions=-1)


def installed(net, sid=5):
    a, b = keyed_pair(sid)
    net.ml[1].install_session(a)
    net.ml[2].install_session(b)
    return a, b


def test_zero_loss_single_transmission():
    n = make_net(engines=False)
    a, _ = installed(n)
    h = n.ml[1].send(a, 8, b"x", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    assert h.status == "acked" and h.transmissions == 1


def test_backoff_timestamps_under_total_loss():
    n = make_net(loss=1.0, link_retries=0, engines=False)
    a, _ = installed(n)
    h = n.ml[1].send(a, 8, b"x", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    assert h.status == "failed" and h.transmissions == 5
    assert [t // MS for t in h.send_times] == [0, 300, 900, 2100, 4500]
    assert isinstance(h.error, msglayer.DeliveryFailed)
    retx = [r for r in n.sim.trace if r.event_kind == "retransmit"]
    assert [r.time_ns for r in retx] == [t for t in h.send_times[1:]]


def test_retransmissions_are_bit_identical():
    n = make_net(loss=1.0, link_retries=0, engines=False)
    a, _ = installed(n)
    sent = []
    real = n.sim.send_datagram
    n.sim.send_datagram = lambda *args, **kw: (sent.append(args[2]), real(*args, **kw))[1]
    n.ml[1].send(a, 8, b"payload", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    assert len(sent) == 5 and len(set(sent)) == 1


def drop_first(n):
    # the 1->2 link is dead for the first 100 ms, then clean
    sub = n.sim.topology.subnets[0]
    sub.directed_loss[(1, 2)] = 1.0
    n.sim.schedule(100 * MS, sub.directed_loss.pop, (1, 2))


def test_first_copy_dropped_then_retransmitted():
    n = make_net(link_retries=0, engines=False)
    a, _ = installed(n)
    drop_first(n)
    h = n.ml[1].send(a, 8, b"x", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    assert h.status == "acked" and [t // MS for t in h.send_times] == [0, 300]


def test_reliable_over_stream_is_usage_error():
    n = make_net(transport=netsim.RELIABLE_STREAM, engines=False)
    a, _ = installed(n)
    with pytest.raises(msglayer.UsageError):
        n.ml[1].send(a, 8, b"x", exchange_id=1, initiator=True, reliable=True)
    h = n.ml[1].send(a, 8, b"x", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    assert h.status == "sent"
    assert n.sim.stats.total("standalone_acks") == 0


def test_duplicate_suppressed_and_reacked():
    n = make_net(engines=False)
    a, b = installed(n)
    got = []
    n.ml[2].on_message = lambda s, h, p: got.append(h.message_counter)
    wire = msglayer.protect(a, MessageHeader(5, a.next_counter(), 8, 1, msg_flags=1), b"x").to_bytes()
    assert n.ml[2].receive(1, wire) == "deliver"
    assert n.ml[2].receive(1, wire) == "duplicate-suppressed"
    assert got == [1]
    n.sim.run_to_completion()
    assert n.sim.stats.get(2, "standalone_acks") == 1  # the duplicate flushed the deferred ack at once
    assert n.sim.stats.get(2, "duplicates") == 1


def test_standalone_ack_at_exactly_ack_defer():
    n = make_net(engines=False)
    a, _ = installed(n)
    n.ml[1].send(a, 8, b"x", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    rx = [r.time_ns for r in n.sim.trace if r.event_kind == "msg_rx" and r.dst == 2]
    acks = [r for r in n.sim.trace if r.event_kind == "msg_tx" and r.src == 2]
    assert len(acks) == 1 and acks[0].flags == "A;p=0;op=0x10"
    assert acks[0].time_ns - rx[0] == 200 * MS


def test_standalone_ack_frame_is_77_bytes():
    n = make_net(engines=False)
    a, _ = installed(n)
    n.ml[1].send(a, 8, b"x", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    frames = [r for r in n.sim.trace if r.event_kind == "frame_tx" and r.src == 2]
    assert [r.bytes for r in frames] == [77] == [encap.thread_breakdown(18, 0).total_bytes]


def test_piggybacked_ack_when_response_is_fast():
    n = make_net(engines=False)
    a, b = installed(n)

    def respond(session, hdr, payload):
        n.sim.schedule(5 * MS, lambda: n.ml[2].send(b, 9, b"resp", exchange_id=hdr.exchange_id, initiator=False))

    n.ml[2].on_message = respond
    h = n.ml[1].send(a, 8, b"req", exchange_id=1, initiator=True)
    n.sim.run_to_completion()
    assert h.status == "acked"
    assert n.sim.stats.get(2, "standalone_acks") == 0
    assert n.sim.stats.get(2, "piggybacked_acks") == 1


def test_integrity_failure_is_counted_and_dropped():
    n = make_net(engines=False)
    a, _ = installed(n)
    wire = bytearray(msglayer.protect(a, MessageHeader(5, 1, 8, 1), b"x").to_bytes())
    wire[-1] ^= 1
    assert n.ml[2].receive(1, bytes(wire)) == "integrity-failure"
    assert n.sim.stats.get(2, "integrity_failures") == 1


def test_unknown_session_and_malformed():
    n = make_net(engines=False)
    assert n.ml[2].receive(1, bytes(5)) == "malformed"
    c = msglayer.Session(9, bytes(16), 1, 2)
    assert n.ml[2].receive(1, msglayer.protect(c, MessageHeader(9, 1, 8, 1), b"").to_bytes()) == "unknown-session"


def test_session_establishment():
    n = make_net(engines=False)
    p = n.ml[1].establish_session(2)
    n.sim.run_to_completion()
    s1 = p.result()
    s2 = n.ml[2].session_for(1)
    assert s1.key == s2.key and s1.id == s2.id
    assert s1.tx_counter == 1 and s2.tx_counter == 1


def test_session_survives_dropped_request():
    n = make_net(link_retries=0, engines=False)
    drop_first(n)
    p = n.ml[1].establish_session(2)
    n.sim.run_to_completion()
    assert p.result().key == n.ml[2].session_for(1).key
    assert n.sim.stats.get(1, "retransmissions") == 1


def test_session_id_collision_resolved():
    n = make_net(engines=False, extra_nodes=1)
    # node 2 already uses id 1 with node 3, so node 1's proposal of 1 collides
    n.ml[2].install_session(msglayer.Session(1, bytes(16), 2, 3))
    p = n.ml[1].establish_session(2)
    n.sim.run_to_completion()
    s1, s2 = p.result(), n.ml[2].session_for(1)
    assert s1.id == s2.id != 1
    assert s1.key == s2.key


def test_sessions_over_stream_transport():
    n = make_net(transport=netsim.RELIABLE_STREAM, engines=False)
    p = n.ml[1].establish_session(2)
    n.sim.run_to_completion()
    assert p.result().key == n.ml[2].session_for(1).key


def test_session_to_unreachable_node_fails():
    n = make_net(engines=False)
    p = n.ml[1].establish_session(99)
    n.sim.run_to_completion()
    assert p.failed


def test_delivery_failure_rate_matches_independent_drops():
    # loss only on the request direction, so each send fails iff all 5 copies drop
    n = make_net(link_retries=0, engines=False)
    n.sim.topology.subnets[0].directed_loss[(1, 2)] = 0.2
    a, _ = installed(n)
    trials, failures = 10_000, 0
    for i in range(trials):
        h = n.ml[1].send(a, 8, b"x", exchange_id=i & 0xFFFF, initiator=True)
        while not h.done:
            n.sim.step()
        failures += h.status == "failed"
    p = 0.2 ** 5
    mean, sd = trials * p, (trials * p * (1 - p)) ** 0.5
    assert max(0, mean - 3 * sd) <= failures <= mean + 3 * sd
