import csv
import struct

import pytest
from hypothesis import given, settings, strategies as st

from pktids import capture, trafficgen as tg
from pktids.capture import StreamKey, StreamRegistry

A, B = "10.0.0.1", "10.0.0.2"
SYN, ACK, RST, PSH = 0x02, 0x10, 0x04, 0x08
T0 = 1_528_000_000_000_000_000  # ns


def tcp_frame(src, dst, sport, dport, flags, payload=b"", seq=1, ack=0, window=29200, **kw):
    seg = tg.tcp_segment(src, dst, sport, dport, seq, ack, flags, window, payload)
    return tg.frame_ipv4(src, dst, 6, seg, **kw)


def udp_frame(src, dst, sport, dport, payload=b"", **kw):
    return tg.frame_ipv4(src, dst, 17, tg.udp_datagram(src, dst, sport, dport, payload), **kw)


def parse(tmp_path, packets, name="c.pcap", **kw):
    path = tmp_path / name
    tg.write_pcap(path, packets, **kw)
    return capture.read_capture(path)


def handshake(t_syn, t_synack, t_ack):
    return [
        (t_syn, tcp_frame(A, B, 40000, 80, SYN)),
        (t_synack, tcp_frame(B, A, 80, 40000, SYN | ACK)),
        (t_ack, tcp_frame(A, B, 40000, 80, ACK)),
    ]


# ------------------------------------------------------------ parse_capture

def test_empty_capture(tmp_path):
    recs, stats = parse(tmp_path, [])
    assert recs == [] and stats.frames == 0


def test_handshake_times_and_rtt(tmp_path):
    t1, t2, t3 = T0, T0 + 1_234_567_000, T0 + 1_234_567_000 + 89_012_000
    recs, _ = parse(tmp_path, handshake(t1, t2, t3))
    assert len(recs) == 3
    assert recs[0].tcp_time_delta == 0 and recs[0].tcp_time_relative == 0
    assert recs[0].tcp_analysis_initial_rtt is None
    assert recs[1].tcp_analysis_initial_rtt is None
    expected = (t2 - t1) / 1e9 + (t3 - t2) / 1e9
    assert abs(recs[2].tcp_analysis_initial_rtt - expected) <= 1e-6
    assert {r.tcp_stream for r in recs} == {0}
    assert abs(recs[2].tcp_time_delta - (t3 - t2) / 1e9) <= 1e-9


def test_rtt_propagates_to_later_packets(tmp_path):
    pk = handshake(T0, T0 + 1000_000, T0 + 3000_000)
    pk.append((T0 + 9000_000, tcp_frame(A, B, 40000, 80, PSH | ACK, b"abc")))
    recs, _ = parse(tmp_path, pk)
    assert recs[3].tcp_analysis_initial_rtt == pytest.approx(0.003, abs=1e-9)
    assert recs[3].tcp_len == 3


def test_incomplete_handshake_has_no_rtt(tmp_path):
    recs, _ = parse(tmp_path, [(T0, tcp_frame(A, B, 1, 2, SYN)),
                               (T0 + 10**6, tcp_frame(A, B, 1, 2, ACK))])
    assert all(r.tcp_analysis_initial_rtt is None for r in recs)


def test_arp_is_skipped(tmp_path):
    recs, stats = parse(tmp_path, [(T0, tg.arp_request(A, B)), (T0 + 1000, udp_frame(A, B, 5353, 53))])
    assert len(recs) == 1 and stats.non_ip == 1
    assert recs[0].udp_srcport == 5353 and recs[0].tcp_srcport is None


def test_vlan_unwrapped(tmp_path):
    ip = tg.ipv4_packet(A, B, 17, tg.udp_datagram(A, B, 1, 2, b"x"))
    frame = tg.ether_frame(ip, tg.mac_for(A), tg.mac_for(B), vlan=42)
    recs, _ = parse(tmp_path, [(T0, frame)])
    assert len(recs) == 1 and recs[0].ip_src == A and recs[0].udp_length == 9


def test_ipv6_udp(tmp_path):
    s, d = "fe80::1", "fe80::2"
    ip = tg.ipv6_packet(s, d, 17, tg.udp_datagram(s, d, 546, 547, b"hello"))
    frame = tg.ether_frame(ip, bytes(6), bytes(6), tg.ETH_IPV6)
    recs, _ = parse(tmp_path, [(T0, frame)])
    r = recs[0]
    assert (r.ip_src, r.ipv6_src, r.ipv6_dst) == ("", s, d)
    assert r.ip_hdr_len == "40" and r.ip_len == str(40 + 13)
    assert r.ip_id is None and r.ip_flags_df is None
    assert r.ip_proto == "17" and r.udp_dstport == 547


def test_bad_magic_and_link_type(tmp_path):
    p = tmp_path / "x.pcap"
    p.write_bytes(b"\0" * 24)
    with pytest.raises(capture.BadMagic):
        capture.parse_capture(p)
    p.write_bytes(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 101))
    with pytest.raises(capture.UnsupportedLinkType):
        capture.parse_capture(p)


def test_truncated_trailing_record(tmp_path):
    path = tmp_path / "t.pcap"
    tg.write_pcap(path, [(T0, udp_frame(A, B, 1, 2)), (T0 + 1, udp_frame(A, B, 1, 2, b"zz"))])
    path.write_bytes(path.read_bytes()[:-5])
    recs, stats = capture.read_capture(path)
    assert len(recs) == 1 and stats.truncated_records == 1


@pytest.mark.parametrize("nanosecond,big_endian", [(False, True), (True, False), (True, True)])
def test_byte_order_and_resolution_twins(tmp_path, nanosecond, big_endian):
    pk = handshake(T0, T0 + 2_000_000, T0 + 5_000_000) + [(T0 + 7_000_000, udp_frame(A, B, 9, 10))]
    base, _ = parse(tmp_path, pk, "base.pcap")
    twin, stats = parse(tmp_path, pk, "twin.pcap", nanosecond=nanosecond, big_endian=big_endian)
    assert stats.swapped == big_endian and stats.nanosecond == nanosecond
    assert base == twin


def test_nanosecond_timestamps_kept(tmp_path):
    pk = handshake(T0 + 1, T0 + 2, T0 + 1_001)
    recs, _ = parse(tmp_path, pk, nanosecond=True)
    assert recs[2].tcp_analysis_initial_rtt == pytest.approx(1e-6, abs=1e-12)


# ------------------------------------------------------------ streams

def test_assign_stream_examples():
    reg = StreamRegistry()
    assert capture.assign_stream(StreamKey.of("TCP", A, 1000, B, 80), reg) == 0
    assert capture.assign_stream(StreamKey.of("TCP", B, 80, A, 1000), reg) == 0
    assert capture.assign_stream(StreamKey.of("UDP", A, 1, B, 2), reg) == 0
    assert capture.assign_stream(StreamKey.of("UDP", A, 3, B, 2), reg) == 1
    assert capture.assign_stream(StreamKey.of("TCP", A, 1001, B, 80), reg) == 1


ports = st.integers(0, 65535)
v4 = st.ip_addresses(v=4).map(str)


@given(v4, ports, v4, ports)
def test_stream_key_symmetric(a, pa, b, pb):
    assert StreamKey.of("TCP", a, pa, b, pb) == StreamKey.of("TCP", b, pb, a, pa)


# ------------------------------------------------------------ ICMP-embedded

def test_icmp_unreachable_quoting_udp(tmp_path):
    probe = tg.ipv4_packet(A, B, 17, tg.udp_datagram(A, B, 33000, 161, b"probe"), ttl=50, ident=777)
    icmp = tg.icmp_message(3, 3, data=probe[:28])
    frame = tg.frame_ipv4(B, A, 1, icmp, ttl=64, ident=9)
    (r,), _ = parse(tmp_path, [(T0, frame)])
    assert r.ip_proto == "1,17"
    assert r.ip_ttl == "64,50" and r.ip_id == "9,777"
    assert r.ip_hdr_len == "20,20" and r.ip_len == f"{20 + 8 + 28},{len(probe)}"
    assert (r.udp_srcport, r.udp_dstport) == (33000, 161)
    assert r.udp_stream is None and r.tcp_srcport is None


def test_icmp_time_exceeded_ttl(tmp_path):
    inner = tg.ipv4_packet(A, "8.8.8.8", 17, tg.udp_datagram(A, "8.8.8.8", 1, 33434), ttl=1)
    frame = tg.frame_ipv4(B, A, 1, tg.icmp_message(11, 0, data=inner), ttl=64)
    (r,), _ = parse(tmp_path, [(T0, frame)])
    assert r.ip_ttl == "64,1"


def test_icmp_echo_plain(tmp_path):
    frame = tg.frame_ipv4(A, B, 1, tg.icmp_message(8, 0, b"\0\1\0\1", b"ping"))
    (r,), _ = parse(tmp_path, [(T0, frame)])
    assert "," not in r.ip_proto + r.ip_ttl + r.ip_id + r.ip_hdr_len + r.ip_len


def test_icmp_truncated_inner(tmp_path):
    inner = tg.ipv4_packet(A, B, 17, tg.udp_datagram(A, B, 1, 2))[:24]
    with pytest.raises(capture.TruncatedInner):
        capture.extract_icmp_embedded(tg.icmp_message(3, 3, data=inner))
    frame = tg.frame_ipv4(B, A, 1, tg.icmp_message(3, 3, data=inner))
    (r,), stats = parse(tmp_path, [(T0, frame)])
    assert r.ip_proto == "1" and stats.truncated_inner == 1 and stats.skipped_ip == 0


# ------------------------------------------------------------ HTTP

def test_http_request_and_status(tmp_path):
    pk = [(T0, tcp_frame(A, B, 5000, 80, PSH | ACK, b"GET /x HTTP/1.1\r\nHost: b\r\n\r\n")),
          (T0 + 1000, tcp_frame(B, A, 80, 5000, PSH | ACK,
                                b"HTTP/1.1 404 Not Found\r\nContent-Length: 12\r\n\r\nnot found!!!"))]
    recs, _ = parse(tmp_path, pk)
    assert recs[0].http_request_method == "GET" and recs[0].http_response_code is None
    assert recs[1].http_response_code == 404 and recs[1].http_content_length == 12


# ------------------------------------------------------------ export

def test_export_empty(tmp_path):
    p = tmp_path / "e.csv"
    assert capture.export_records([], p) == 0
    rows = list(csv.reader(open(p)))
    assert rows == [list(capture.COLUMNS)]


def test_export_udp_row_and_quoting(tmp_path):
    probe = tg.ipv4_packet(A, B, 17, tg.udp_datagram(A, B, 1, 2))
    pk = [(T0, udp_frame(A, B, 1, 2)), (T0 + 5, tg.frame_ipv4(B, A, 1, tg.icmp_message(3, 3, data=probe)))]
    recs, _ = parse(tmp_path, pk)
    p = tmp_path / "u.csv"
    assert capture.export_records(recs, p) == 2
    text = p.read_text()
    assert '"1,17"' in text
    header, first, _ = list(csv.reader(open(p)))
    row = dict(zip(header, first))
    assert all(row[c] == "" for c in capture.COLUMNS if c.startswith("tcp."))
    assert row["udp.srcport"] == "1"


def test_export_round_trip(tmp_path, small_records):
    recs = small_records[0]
    p = tmp_path / "r.csv"
    capture.export_records(recs, p)
    assert capture.import_records(p) == recs


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["tcp", "udp"]), ports, ports,
                          st.binary(max_size=40), st.integers(1, 10**9)), min_size=1, max_size=8))
def test_export_round_trip_property(tmp_path_factory, items):
    tmp = tmp_path_factory.mktemp("rt")
    t, pk = T0, []
    for proto, sp, dp, payload, gap in items:
        t += gap
        if proto == "udp":
            pk.append((t, udp_frame(A, B, sp, dp, payload)))
        else:
            pk.append((t, tcp_frame(A, B, sp, dp, ACK, payload)))
    recs, _ = parse(tmp, pk)
    capture.export_records(recs, tmp / "p.csv")
    assert capture.import_records(tmp / "p.csv") == recs


# ------------------------------------------------------------ generator output

def test_generator_capture_invariants(small_scenario, small_records):
    recs, stats = small_records
    assert stats.skipped_ip == 0 and stats.ip_packets == len(small_scenario.labels)
    last_rel = {}
    for r in recs:
        assert bool(r.ip_src) != bool(r.ipv6_src)
        assert not (r.tcp_srcport is not None and r.udp_srcport is not None)
        if r.tcp_stream is not None:
            assert r.tcp_time_delta >= 0 and r.tcp_time_relative >= last_rel.get(r.tcp_stream, 0)
            last_rel[r.tcp_stream] = r.tcp_time_relative
            if r.ip_proto == "6":
                assert r.tcp_len == int(r.ip_len) - int(r.ip_hdr_len) - r.tcp_hdr_len
        assert len(r.values()) == 29


def test_parse_deterministic(small_scenario, small_records):
    again, _ = capture.read_capture(small_scenario.capture)
    assert again == small_records[0]
