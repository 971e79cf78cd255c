import pytest
from hypothesis import given
from hypothesis import strategies as st

from mattersim import encap
from mattersim.encap import CompressionOptions

# Per-layer byte counts of a Thread frame: 802.15.4 header+footer, 6LoWPAN IPv6, 6LoWPAN UDP, MIC.
MAC, IPV6, UDP, MIC, MESH = 17, 19, 7, 16, 6

opts_st = st.builds(CompressionOptions, st.booleans(), st.booleans(), st.booleans())


def test_baseline_layers_for_25_byte_command():
    bd = encap.thread_breakdown(18, 25)
    assert bd.layers == [("IEEE 802.15.4", MAC), ("IPv6", IPV6), ("UDP", UDP), ("Message Layer", 18 + MIC)]
    assert bd.total_bytes == MAC + IPV6 + UDP + 18 + MIC + 25 == 102
    assert not bd.fragmented and bd.fragment_count == 1


@pytest.mark.parametrize("payload,total", [(25, 102), (33, 110), (0, 77)])
def test_thread_totals(payload, total):
    assert encap.thread_breakdown(18, payload).total_bytes == total


def test_short_header_saves_four_bytes():
    assert encap.thread_breakdown(14, 25).total_bytes == 98


def test_multihop_adds_mesh_header():
    single = encap.thread_breakdown(18, 25)
    multi = encap.thread_breakdown(18, 25, multihop=True)
    assert multi.layer("Mesh-under") == MESH
    assert multi.total_bytes - single.total_bytes == MESH
    assert multi.total_bytes == 108


@pytest.mark.parametrize("letters,udp,ipv6", [
    ("", 7, 19), ("b", 4, 19), ("c", 5, 19), ("b,c", 2, 19), ("a", 7, 3), ("a,b,c", 2, 3),
])
def test_optimizations(letters, udp, ipv6):
    bd = encap.thread_breakdown(18, 25, opts=CompressionOptions.from_letters(letters))
    assert bd.layer("UDP") == udp
    assert bd.layer("IPv6") == ipv6


def test_letters_roundtrip():
    o = CompressionOptions.from_letters("c,a")
    assert (o.full_address_compression, o.udp_port_compression, o.elide_udp_checksum) == (True, False, True)
    assert CompressionOptions.from_letters(o.letters) == o


def test_unknown_letter_rejected():
    with pytest.raises(ValueError):
        CompressionOptions.from_letters("a,d")


def test_context_slots_limit():
    CompressionOptions(True, context_slots_used=16)
    with pytest.raises(ValueError):
        CompressionOptions(True, context_slots_used=17)


@pytest.mark.parametrize("header", [0, 13, 15, 19, 20])
def test_invalid_header_size(header):
    with pytest.raises(ValueError):
        encap.thread_breakdown(header, 25)


def test_compressed_header_allowed_on_request():
    assert encap.thread_breakdown(2, 25, allow_compressed_header=True).total_bytes == 86


def test_negative_payload_rejected():
    with pytest.raises(ValueError):
        encap.thread_breakdown(18, -1)


def test_wifi_defaults():
    bd = encap.wifi_breakdown(18, 25)
    assert bd.total_bytes == 30 + 8 + 40 + 8 + 34 + 25 == 145
    assert encap.wifi_breakdown(18, 0).total_bytes == 120
    assert not bd.fragmented


def test_max_unfragmented_payload():
    assert encap.max_unfragmented_payload() == 127 - 77 == 50
    assert encap.max_unfragmented_payload(multihop=True) == 44
    assert encap.max_unfragmented_payload(False, encap.ALL_COMPRESSION, header_bytes=2) == 127 - (17 + 3 + 2 + 2 + 16)


def test_frame_size_range():
    assert encap.frame_size_range() == (77, 127)


def test_fragmentation_arithmetic():
    bd = encap.thread_breakdown(18, 200)
    ip_bytes = IPV6 + UDP + 18 + MIC + 200
    per_frame = 127 - MAC - 5
    count = -(-ip_bytes // per_frame)
    assert bd.fragmented and bd.fragment_count == count == 3
    assert bd.fragment_overhead == (count - 1) * MAC + count * 5
    assert bd.total_bytes == MAC + ip_bytes + bd.fragment_overhead


@given(st.integers(0, 400), st.booleans(), opts_st, st.sampled_from([14, 18]))
def test_total_is_layers_plus_payload(payload, multihop, opts, header):
    bd = encap.thread_breakdown(header, payload, multihop, opts)
    assert bd.total_bytes == sum(n for _, n in bd.layers) + payload + bd.fragment_overhead
    assert bd.fragmented == (bd.fragment_count > 1)


@given(st.integers(0, 400), st.booleans(), opts_st)
def test_total_strictly_increasing_in_payload(payload, multihop, opts):
    a = encap.thread_breakdown(18, payload, multihop, opts).total_bytes
    b = encap.thread_breakdown(18, payload + 1, multihop, opts).total_bytes
    assert b > a


@given(st.integers(0, 400), st.booleans(), opts_st, opts_st)
def test_optimizations_never_increase_total(payload, multihop, base, extra):
    more = CompressionOptions(base.full_address_compression or extra.full_address_compression,
                              base.udp_port_compression or extra.udp_port_compression,
                              base.elide_udp_checksum or extra.elide_udp_checksum)
    assert (encap.thread_breakdown(18, payload, multihop, more).total_bytes
            <= encap.thread_breakdown(18, payload, multihop, base).total_bytes)


@given(st.booleans(), opts_st, st.sampled_from([14, 18]))
def test_fragmentation_threshold(multihop, opts, header):
    limit = encap.max_unfragmented_payload(multihop, opts, header)
    assert not encap.thread_breakdown(header, limit, multihop, opts).fragmented
    assert encap.thread_breakdown(header, limit, multihop, opts).total_bytes == 127
    assert encap.thread_breakdown(header, limit + 1, multihop, opts).fragmented


@given(st.integers(0, 1000))
def test_wifi_exceeds_thread(payload):
    assert encap.wifi_breakdown(18, payload).total_bytes > encap.thread_breakdown(18, payload).total_bytes or \
        encap.thread_breakdown(18, payload).fragmented
