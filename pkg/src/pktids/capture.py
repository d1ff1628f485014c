"""Classic PCAP reading and per-packet header-field extraction.

Each IPv4/IPv6 packet in a capture becomes one :class:`PacketRecord` holding
the 29 header fields used as model features.  TCP and UDP conversations are
indexed in first-seen order so stream-relative timing fields can be derived.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

from .httpmethods import HTTP_METHODS

log = logging.getLogger(__name__)

# Column names in export order.
COLUMNS: tuple[str, ...] = (
    "frame.time_epoch", "frame.len",
    "ip.proto", "ip.src", "ip.dst", "ipv6.src", "ipv6.dst",
    "ip.ttl", "ip.id", "ip.hdr_len", "ip.len", "ip.flags.df",
    "tcp.srcport", "tcp.dstport", "tcp.stream", "tcp.time_delta",
    "tcp.time_relative", "tcp.analysis.initial_rtt", "tcp.flags",
    "tcp.window_size_value", "tcp.hdr_len", "tcp.len",
    "udp.srcport", "udp.dstport", "udp.stream", "udp.length",
    "http.response.code", "http.request.method", "http.content_length",
)

TEXT_COLUMNS = frozenset({
    "ip.proto", "ip.src", "ip.dst", "ipv6.src", "ipv6.dst",
    "ip.ttl", "ip.id", "ip.hdr_len", "ip.len", "http.request.method",
})
FLOAT_COLUMNS = frozenset({
    "frame.time_epoch", "tcp.time_delta", "tcp.time_relative",
    "tcp.analysis.initial_rtt",
})
INT_COLUMNS = frozenset(COLUMNS) - TEXT_COLUMNS - FLOAT_COLUMNS

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = 0x8100

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

ICMP_DEST_UNREACH = 3
ICMP_TIME_EXCEEDED = 11

_IPV6_EXT_HEADERS = {0, 43, 60}
_IPV6_FRAGMENT = 44
_IPV6_AH = 51

_HTTP_PREFIXES = tuple(m.encode() + b" " for m in HTTP_METHODS)


class CaptureError(Exception):
    pass


class BadMagic(CaptureError):
    pass


class UnsupportedLinkType(CaptureError):
    pass


class TruncatedInner(CaptureError):
    """ICMP error message whose quoted datagram header is incomplete."""


@dataclass
class PacketRecord:
    frame_time_epoch: float
    frame_len: int
    ip_proto: str
    ip_src: str = ""
    ip_dst: str = ""
    ipv6_src: str = ""
    ipv6_dst: str = ""
    ip_ttl: str = ""
    ip_id: Optional[str] = None
    ip_hdr_len: str = ""
    ip_len: str = ""
    ip_flags_df: Optional[int] = None
    tcp_srcport: Optional[int] = None
    tcp_dstport: Optional[int] = None
    tcp_stream: Optional[int] = None
    tcp_time_delta: Optional[float] = None
    tcp_time_relative: Optional[float] = None
    tcp_analysis_initial_rtt: Optional[float] = None
    tcp_flags: Optional[int] = None
    tcp_window_size_value: Optional[int] = None
    tcp_hdr_len: Optional[int] = None
    tcp_len: Optional[int] = None
    udp_srcport: Optional[int] = None
    udp_dstport: Optional[int] = None
    udp_stream: Optional[int] = None
    udp_length: Optional[int] = None
    http_response_code: Optional[int] = None
    http_request_method: Optional[str] = None
    http_content_length: Optional[int] = None
    # provenance, not exported
    source: str = field(default="", compare=False)
    frame_number: int = field(default=0, compare=False)

    def values(self) -> tuple:
        """The 29 exported field values in column order."""
        return tuple(getattr(self, name) for name in _ATTRS)


_ATTRS = tuple(f.name for f in fields(PacketRecord))[: len(COLUMNS)]
COLUMN_ATTR = dict(zip(COLUMNS, _ATTRS))
assert len(_ATTRS) == 29


@dataclass(frozen=True)
class StreamKey:
    proto: str
    endpoint_lo: tuple
    endpoint_hi: tuple

    @classmethod
    def of(cls, proto: str, src: str, sport: int, dst: str, dport: int) -> "StreamKey":
        a, b = (src, sport), (dst, dport)
        if _endpoint_order(b) < _endpoint_order(a):
            a, b = b, a
        return cls(proto, a, b)


def _endpoint_order(ep):
    addr, port = ep
    ip = ipaddress.ip_address(addr)
    return (ip.version, int(ip), port)


class StreamRegistry:
    """First-seen stream numbering, kept separately per transport protocol."""

    def __init__(self):
        self._index: dict[str, dict[StreamKey, int]] = {"TCP": {}, "UDP": {}}

    def assign(self, key: StreamKey) -> int:
        table = self._index[key.proto]
        idx = table.get(key)
        if idx is None:
            idx = table[key] = len(table)
        return idx

    def __len__(self):
        return sum(len(t) for t in self._index.values())


def assign_stream(key: StreamKey, registry: StreamRegistry) -> int:
    return registry.assign(key)


@dataclass
class CaptureOptions:
    decode_http: bool = True
    unwrap_vlan: bool = True
    limit: Optional[int] = None


@dataclass
class CaptureStats:
    frames: int = 0
    ip_packets: int = 0
    non_ip: int = 0
    skipped_ip: int = 0
    truncated_records: int = 0
    truncated_inner: int = 0
    nanosecond: bool = False
    swapped: bool = False


class PcapReader:
    """Iterator over (timestamp_ns, orig_len, frame_bytes) of a classic PCAP file."""

    def __init__(self, fh: BinaryIO):
        self.fh = fh
        header = fh.read(24)
        if len(header) < 24:
            raise BadMagic("file shorter than a PCAP global header")
        magic_le = struct.unpack("<I", header[:4])[0]
        for endian in ("<", ">"):
            magic = struct.unpack(endian + "I", header[:4])[0]
            if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
                break
        else:
            raise BadMagic(f"unrecognised PCAP magic 0x{magic_le:08x}")
        self.endian = endian
        self.swapped = endian == ">"
        self.nanosecond = magic == PCAP_MAGIC_NS
        (_, self.version_major, self.version_minor, _, _, self.snaplen,
         self.linktype) = struct.unpack(endian + "IHHiIII", header)
        self.linktype &= 0xFFFF
        if self.linktype != LINKTYPE_ETHERNET:
            raise UnsupportedLinkType(f"link type {self.linktype} (only Ethernet is supported)")
        self.truncated = 0
        self._rec = struct.Struct(endian + "IIII")

    def __iter__(self) -> Iterator[tuple[int, int, bytes]]:
        scale = 1 if self.nanosecond else 1000
        read = self.fh.read
        while True:
            hdr = read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                self.truncated += 1
                return
            sec, frac, incl, orig = self._rec.unpack(hdr)
            data = read(incl)
            if len(data) < incl:
                self.truncated += 1
                return
            yield sec * 1_000_000_000 + frac * scale, orig, data


class _TcpState:
    __slots__ = ("first_ns", "last_ns", "syn_ns", "syn_src", "synack", "rtt")

    def __init__(self, ts):
        self.first_ns = ts
        self.last_ns = ts
        self.syn_ns = None
        self.syn_src = None
        self.synack = False
        self.rtt = None


def _ns_to_s(ns: int) -> float:
    return ns / 1e9


def extract_icmp_embedded(icmp: bytes) -> dict:
    """Field overrides for an ICMP error quoting an IPv4 datagram.

    Returns the *inner* values keyed by attribute name; the caller joins them
    with the outer values.  Returns an empty dict for ICMP types that carry no
    quoted datagram.  Raises TruncatedInner if the quoted header is incomplete.
    """
    if len(icmp) < 8 or icmp[0] not in (ICMP_DEST_UNREACH, ICMP_TIME_EXCEEDED):
        return {}
    inner = icmp[8:]
    if len(inner) < 20 or inner[0] >> 4 != 4:
        raise TruncatedInner("quoted IPv4 header incomplete")
    ihl = (inner[0] & 0x0F) * 4
    if ihl < 20 or len(inner) < ihl + 8:
        raise TruncatedInner("quoted datagram shorter than header + 8 bytes")
    total_len, ident = struct.unpack_from("!HH", inner, 2)
    ttl, proto = inner[8], inner[9]
    out = {
        "ip_proto": str(proto),
        "ip_ttl": str(ttl),
        "ip_id": str(ident),
        "ip_hdr_len": str(ihl),
        "ip_len": str(total_len),
    }
    sport, dport, ulen = struct.unpack_from("!HHH", inner, ihl)
    if proto == PROTO_UDP:
        out.update(udp_srcport=sport, udp_dstport=dport, udp_length=ulen)
    elif proto == PROTO_TCP:
        out.update(tcp_srcport=sport, tcp_dstport=dport)
    return out


def _parse_http(payload: bytes) -> tuple[Optional[str], Optional[int], Optional[int]]:
    method = code = length = None
    if payload.startswith(b"HTTP/1."):
        parts = payload.split(b"\r\n", 1)[0].split(b" ")
        if len(parts) >= 2 and parts[1].isdigit():
            code = int(parts[1])
    elif payload.startswith(_HTTP_PREFIXES):
        method = payload.split(b" ", 1)[0].decode("ascii")
    else:
        return None, None, None
    head = payload.split(b"\r\n\r\n", 1)[0]
    for line in head.split(b"\r\n")[1:]:
        name, _, value = line.partition(b":")
        if name.strip().lower() == b"content-length":
            value = value.strip()
            if value.isdigit():
                length = int(value)
            break
    return method, code, length


class FieldExtractor:
    """Stateful per-file extractor; one instance per capture file."""

    def __init__(self, opts: Optional[CaptureOptions] = None, source: str = ""):
        self.opts = opts or CaptureOptions()
        self.source = source
        self.registry = StreamRegistry()
        self.stats = CaptureStats()
        self._tcp: dict[int, _TcpState] = {}
        self._udp_seen: set[int] = set()

    def packet(self, ts_ns: int, orig_len: int, frame: bytes) -> Optional[PacketRecord]:
        """Decode one Ethernet frame; returns None for non-IP frames."""
        self.stats.frames += 1
        if len(frame) < 14:
            self.stats.non_ip += 1
            return None
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        off = 14
        if ethertype == ETH_VLAN and self.opts.unwrap_vlan and len(frame) >= 18:
            ethertype = struct.unpack_from("!H", frame, 16)[0]
            off = 18
        if ethertype not in (ETH_IPV4, ETH_IPV6):
            self.stats.non_ip += 1
            return None
        self.stats.ip_packets += 1
        try:
            if ethertype == ETH_IPV4:
                rec = self._ipv4(ts_ns, orig_len, frame[off:])
            else:
                rec = self._ipv6(ts_ns, orig_len, frame[off:])
        except (struct.error, IndexError, ValueError) as exc:
            log.debug("frame %d: malformed IP packet (%s)", self.stats.frames, exc)
            self.stats.skipped_ip += 1
            return None
        rec.source = self.source
        rec.frame_number = self.stats.frames
        return rec

    def _ipv4(self, ts, orig_len, ip: bytes) -> PacketRecord:
        ver_ihl = ip[0]
        if ver_ihl >> 4 != 4:
            raise ValueError("not IPv4")
        ihl = (ver_ihl & 0x0F) * 4
        total_len, ident, flags_frag = struct.unpack_from("!HHH", ip, 2)
        ttl, proto = ip[8], ip[9]
        src = str(ipaddress.IPv4Address(ip[12:16]))
        dst = str(ipaddress.IPv4Address(ip[16:20]))
        rec = PacketRecord(
            frame_time_epoch=_ns_to_s(ts), frame_len=orig_len, ip_proto=str(proto),
            ip_src=src, ip_dst=dst, ip_ttl=str(ttl), ip_id=str(ident),
            ip_hdr_len=str(ihl), ip_len=str(total_len),
            ip_flags_df=(flags_frag >> 14) & 1,
        )
        if flags_frag & 0x1FFF:
            # non-first fragment: no transport header
            return rec
        payload = ip[ihl:total_len] if total_len >= ihl else ip[ihl:]
        l4_len = total_len - ihl
        if proto == PROTO_TCP:
            self._tcp_fields(rec, ts, src, dst, payload, l4_len)
        elif proto == PROTO_UDP:
            self._udp_fields(rec, ts, src, dst, payload)
        elif proto == PROTO_ICMP:
            try:
                inner = extract_icmp_embedded(payload)
            except TruncatedInner:
                self.stats.truncated_inner += 1
                inner = {}
            for name, value in inner.items():
                if name.startswith("ip_"):
                    setattr(rec, name, f"{getattr(rec, name)},{value}")
                else:
                    setattr(rec, name, value)
        return rec

    def _ipv6(self, ts, orig_len, ip: bytes) -> PacketRecord:
        if ip[0] >> 4 != 6:
            raise ValueError("not IPv6")
        payload_len = struct.unpack_from("!H", ip, 4)[0]
        nxt, hop = ip[6], ip[7]
        src = str(ipaddress.IPv6Address(ip[8:24]))
        dst = str(ipaddress.IPv6Address(ip[24:40]))
        off = 40
        end = 40 + payload_len
        fragmented = False
        while True:
            if nxt in _IPV6_EXT_HEADERS:
                nxt, off = ip[off], off + (ip[off + 1] + 1) * 8
            elif nxt == _IPV6_FRAGMENT:
                frag = struct.unpack_from("!H", ip, off + 2)[0]
                fragmented = bool(frag & 0xFFF8)
                nxt, off = ip[off], off + 8
            elif nxt == _IPV6_AH:
                nxt, off = ip[off], off + (ip[off + 1] + 2) * 4
            else:
                break
        rec = PacketRecord(
            frame_time_epoch=_ns_to_s(ts), frame_len=orig_len, ip_proto=str(nxt),
            ipv6_src=src, ipv6_dst=dst, ip_ttl=str(hop), ip_hdr_len="40",
            ip_len=str(payload_len + 40),
        )
        if fragmented:
            return rec
        payload = ip[off:end]
        if nxt == PROTO_TCP:
            self._tcp_fields(rec, ts, src, dst, payload, end - off)
        elif nxt == PROTO_UDP:
            self._udp_fields(rec, ts, src, dst, payload)
        return rec

    def _tcp_fields(self, rec, ts, src, dst, seg: bytes, seg_len: int):
        sport, dport = struct.unpack_from("!HH", seg, 0)
        off_byte, flag_byte = seg[12], seg[13]
        window = struct.unpack_from("!H", seg, 14)[0]
        hdr_len = (off_byte >> 4) * 4
        flags = ((off_byte & 0x0F) << 8) | flag_byte
        key = StreamKey.of("TCP", src, sport, dst, dport)
        idx = self.registry.assign(key)
        st = self._tcp.get(idx)
        if st is None:
            st = self._tcp[idx] = _TcpState(ts)
        delta = ts - st.last_ns
        st.last_ns = ts

        syn, ack = flags & 0x02, flags & 0x10
        if syn and not ack and st.syn_ns is None:
            st.syn_ns, st.syn_src = ts, (src, sport)
        elif syn and ack and st.syn_ns is not None and (dst, dport) == st.syn_src:
            st.synack = True
        elif (ack and not syn and st.synack and st.rtt is None
              and (src, sport) == st.syn_src):
            st.rtt = ts - st.syn_ns

        rec.tcp_srcport, rec.tcp_dstport = sport, dport
        rec.tcp_stream = idx
        rec.tcp_time_delta = _ns_to_s(max(delta, 0))
        rec.tcp_time_relative = _ns_to_s(ts - st.first_ns)
        rec.tcp_analysis_initial_rtt = None if st.rtt is None else _ns_to_s(st.rtt)
        rec.tcp_flags = flags
        rec.tcp_window_size_value = window
        rec.tcp_hdr_len = hdr_len
        rec.tcp_len = seg_len - hdr_len
        if self.opts.decode_http and rec.tcp_len > 0:
            method, code, length = _parse_http(seg[hdr_len:])
            rec.http_request_method = method
            rec.http_response_code = code
            rec.http_content_length = length

    def _udp_fields(self, rec, ts, src, dst, dgram: bytes):
        sport, dport, length = struct.unpack_from("!HHH", dgram, 0)
        rec.udp_srcport, rec.udp_dstport = sport, dport
        rec.udp_stream = self.registry.assign(StreamKey.of("UDP", src, sport, dst, dport))
        rec.udp_length = length


def iter_capture(path, opts: Optional[CaptureOptions] = None,
                 extractor: Optional[FieldExtractor] = None) -> Iterator[PacketRecord]:
    path = Path(path)
    ex = extractor or FieldExtractor(opts, source=str(path))
    with open(path, "rb") as fh:
        reader = PcapReader(fh)
        ex.stats.nanosecond = reader.nanosecond
        ex.stats.swapped = reader.swapped
        n = 0
        for ts, orig, frame in reader:
            rec = ex.packet(ts, orig, frame)
            if rec is None:
                continue
            yield rec
            n += 1
            if ex.opts.limit is not None and n >= ex.opts.limit:
                break
        ex.stats.truncated_records = reader.truncated
    if reader.truncated:
        log.warning("%s: skipped %d truncated trailing record(s)", path, reader.truncated)
    if ex.stats.skipped_ip:
        log.warning("%s: skipped %d malformed IP packet(s)", path, ex.stats.skipped_ip)


def read_capture(path, opts: Optional[CaptureOptions] = None) -> tuple[list[PacketRecord], CaptureStats]:
    ex = FieldExtractor(opts, source=str(path))
    records = list(iter_capture(path, extractor=ex))
    return records, ex.stats


def parse_capture(path, opts: Optional[CaptureOptions] = None) -> list[PacketRecord]:
    return read_capture(path, opts)[0]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_records(records, out, format: str = "csv") -> int:
    """Write records as CSV with the 29-column header; returns the row count."""
    if format != "csv":
        raise ValueError(f"unsupported export format {format!r}")
    n = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for rec in records:
            w.writerow([_cell(v) for v in rec.values()])
            n += 1
    return n


def _typed(column: str, text: str):
    if column in TEXT_COLUMNS:
        if text == "":
            return "" if column in ("ip.src", "ip.dst", "ipv6.src", "ipv6.dst") else None
        return text
    if text == "":
        return None
    if column in FLOAT_COLUMNS:
        return float(text)
    return int(text)


def import_records(path) -> list[PacketRecord]:
    """Read a CSV written by :func:`export_records` back into records."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header[: len(COLUMNS)]) != COLUMNS:
            raise CaptureError(f"{path}: not a packet-field CSV")
        for i, row in enumerate(r, 1):
            kw = {COLUMN_ATTR[c]: _typed(c, v) for c, v in zip(COLUMNS, row)}
            for attr in ("ip_proto", "ip_ttl", "ip_hdr_len", "ip_len"):
                if kw[attr] is None:
                    kw[attr] = ""
            out.append(PacketRecord(**kw, source=str(path), frame_number=i))
    return out
