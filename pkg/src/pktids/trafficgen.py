"""Deterministic synthetic smart-home capture with labelled attack traffic.

The generator writes three files into an output directory:

``cap.pcap``
    classic little-endian PCAP, microsecond timestamps, Ethernet link type
``rules.jsonl``
    one labelling rule per line (subcategory, attacker ips, start, end)
``manifest.txt``
    per-subcategory counts followed by one ground-truth label per IP packet

Attack emitters imitate the header behaviour of the usual tools (hping3
floods, nmap scans and OS detection, a meterpreter-style reverse shell) and
make no claim of statistical fidelity to any public dataset.
"""

from __future__ import annotations

import ipaddress
import json
import struct
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .labeling import CATEGORY_OF, SUBCATEGORIES

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_ARP = 0x0806
ETH_VLAN = 0x8100

FIN, SYN, RST, PSH, ACK, URG, ECE, CWR = 0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80

MQTT_PORT = 1883
HTTP_PORT = 80
SHELL_PORT = 4444

# Linux SYN options: MSS, SACK permitted, timestamps, NOP, window scale.
_LINUX_SYN_OPTS = bytes([2, 4, 0x05, 0xB4, 4, 2, 8, 10]) + bytes(8) + bytes([1, 3, 3, 7])
_LINUX_TS_OPTS = bytes([1, 1, 8, 10]) + bytes(8)
_NMAP_SYN_OPTS = bytes([2, 4, 0x05, 0xB4])

MAX_PCAP_SECONDS = 2**32 - 1


class BudgetOverflow(ValueError):
    pass


# ---------------------------------------------------------------- builders

def inet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def _ip_bytes(addr: str) -> bytes:
    return ipaddress.ip_address(addr).packed


def mac_for(addr: str) -> bytes:
    return b"\x02\x00" + _ip_bytes(addr)[-4:]


def ipv4_packet(src: str, dst: str, proto: int, payload: bytes, ttl: int = 64,
                ident: int = 0, df: bool = True, tos: int = 0,
                total_len: Optional[int] = None) -> bytes:
    length = 20 + len(payload) if total_len is None else total_len
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, tos, length, ident & 0xFFFF,
                      0x4000 if df else 0, ttl, proto, 0, _ip_bytes(src), _ip_bytes(dst))
    csum = inet_checksum(hdr)
    return hdr[:10] + struct.pack("!H", csum) + hdr[12:] + payload


def ipv6_packet(src: str, dst: str, next_header: int, payload: bytes, hop_limit: int = 64) -> bytes:
    hdr = struct.pack("!IHBB16s16s", 6 << 28, len(payload), next_header, hop_limit,
                      _ip_bytes(src), _ip_bytes(dst))
    return hdr + payload


def _pseudo(src: str, dst: str, proto: int, length: int) -> bytes:
    s, d = _ip_bytes(src), _ip_bytes(dst)
    if len(s) == 4:
        return s + d + struct.pack("!BBH", 0, proto, length)
    return s + d + struct.pack("!IxxxB", length, proto)


def tcp_segment(src: str, dst: str, sport: int, dport: int, seq: int, ack: int,
                flags: int, window: int, payload: bytes = b"", options: bytes = b"",
                urgent: int = 0) -> bytes:
    if len(options) % 4:
        options += b"\0" * (4 - len(options) % 4)
    off = (20 + len(options)) // 4
    hdr = struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      (off << 4) | ((flags >> 8) & 0x0F), flags & 0xFF, window, 0, urgent)
    seg = hdr + options + payload
    csum = inet_checksum(_pseudo(src, dst, 6, len(seg)) + seg)
    return seg[:16] + struct.pack("!H", csum) + seg[18:]


def udp_datagram(src: str, dst: str, sport: int, dport: int, payload: bytes = b"") -> bytes:
    length = 8 + len(payload)
    dg = struct.pack("!HHHH", sport, dport, length, 0) + payload
    csum = inet_checksum(_pseudo(src, dst, 17, length) + dg) or 0xFFFF
    return dg[:6] + struct.pack("!H", csum) + dg[8:]


def icmp_message(icmp_type: int, code: int, rest: bytes = bytes(4), data: bytes = b"") -> bytes:
    msg = struct.pack("!BBH", icmp_type, code, 0) + rest + data
    return msg[:2] + struct.pack("!H", inet_checksum(msg)) + msg[4:]


def ether_frame(payload: bytes, src_mac: bytes, dst_mac: bytes, ethertype: int = ETH_IPV4,
                vlan: Optional[int] = None) -> bytes:
    if vlan is not None:
        return dst_mac + src_mac + struct.pack("!HHH", ETH_VLAN, vlan & 0x0FFF, ethertype) + payload
    return dst_mac + src_mac + struct.pack("!H", ethertype) + payload


def arp_request(sender: str, target: str) -> bytes:
    smac = mac_for(sender)
    body = struct.pack("!HHBBH6s4s6s4s", 1, ETH_IPV4, 6, 4, 1, smac, _ip_bytes(sender),
                       bytes(6), _ip_bytes(target))
    return ether_frame(body, smac, b"\xff" * 6, ETH_ARP)


def frame_ipv4(src: str, dst: str, ip_payload_proto: int, payload: bytes, **ip_kw) -> bytes:
    return ether_frame(ipv4_packet(src, dst, ip_payload_proto, payload, **ip_kw),
                       mac_for(src), mac_for(dst))


class PcapWriter:
    """Classic PCAP writer; ``big_endian`` emits the byte-swapped layout."""

    def __init__(self, fh, nanosecond: bool = False, big_endian: bool = False,
                 snaplen: int = 65535, linktype: int = 1):
        self.fh = fh
        self.nanosecond = nanosecond
        self.endian = ">" if big_endian else "<"
        magic = 0xA1B23C4D if nanosecond else 0xA1B2C3D4
        fh.write(struct.pack(self.endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, linktype))
        self._rec = struct.Struct(self.endian + "IIII")

    def write(self, ts_ns: int, frame: bytes, orig_len: Optional[int] = None):
        sec, rem = divmod(ts_ns, 1_000_000_000)
        frac = rem if self.nanosecond else rem // 1000
        self.fh.write(self._rec.pack(sec, frac, len(frame),
                                     len(frame) if orig_len is None else orig_len))
        self.fh.write(frame)


def write_pcap(path, packets, nanosecond: bool = False, big_endian: bool = False):
    """Write ``(ts_ns, frame)`` pairs to a new capture file."""
    with open(path, "wb") as fh:
        w = PcapWriter(fh, nanosecond=nanosecond, big_endian=big_endian)
        for ts, frame in packets:
            w.write(ts, frame)


# ---------------------------------------------------------------- scenario

@dataclass
class Roster:
    devices: tuple[str, ...] = ("192.168.100.10", "192.168.100.11", "192.168.100.12",
                                "192.168.100.13", "192.168.100.14", "192.168.100.15")
    broker: str = "192.168.100.3"
    victim: str = "192.168.100.5"
    bots: tuple[str, ...] = ("192.168.100.147", "192.168.100.148",
                             "192.168.100.149", "192.168.100.150")


DEFAULT_BUDGETS = {
    "normal": 12000,
    "ddos_tcp": 8000, "ddos_udp": 8000, "dos_tcp": 8000, "dos_udp": 8000,
    "service_scan": 8000,
    "ddos_http": 2000, "dos_http": 2000, "os_fingerprint": 2000,
    "data_exfiltration": 2000, "keylogging": 2000,
}

# window lengths in seconds, laid out back to back with gaps
DEFAULT_WINDOW_LENGTHS = {
    "ddos_tcp": 60, "ddos_udp": 60, "dos_tcp": 60, "dos_udp": 60,
    "ddos_http": 120, "dos_http": 120, "service_scan": 120, "os_fingerprint": 120,
    "data_exfiltration": 120, "keylogging": 600,
}
WINDOW_GAP = 30.0
ATTACKS = tuple(s for s in SUBCATEGORIES if s != "normal")


def default_windows(lengths=None, gap: float = WINDOW_GAP) -> dict[str, tuple[float, float]]:
    lengths = lengths or DEFAULT_WINDOW_LENGTHS
    out, t = {}, gap
    for sub in ATTACKS:
        out[sub] = (t, t + lengths[sub])
        t += lengths[sub] + gap
    return out


@dataclass
class ScenarioSpec:
    seed: int = 7
    base_epoch: int = 1_528_000_000
    duration: Optional[float] = None
    roster: Roster = field(default_factory=Roster)
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    windows: dict = field(default_factory=default_windows)
    arp_every: int = 500  # one ARP request per this many normal packets; 0 disables

    def __post_init__(self):
        if self.duration is None:
            self.duration = max((w[1] for w in self.windows.values()), default=0.0) + WINDOW_GAP
        for sub, n in self.budgets.items():
            if sub not in CATEGORY_OF:
                raise ValueError(f"unknown subcategory {sub!r}")
            if n < 0:
                raise ValueError(f"negative budget for {sub}")
        for sub, (a, b) in self.windows.items():
            if not 0 <= a < b <= self.duration:
                raise ValueError(f"window for {sub} outside [0, duration]")
        hosts = set(self.roster.devices) | {self.roster.broker, self.roster.victim}
        if hosts & set(self.roster.bots):
            raise ValueError("attacker addresses overlap device addresses")
        if self.base_epoch + self.duration + 3600 > MAX_PCAP_SECONDS:
            raise BudgetOverflow("scenario timestamps exceed the 32-bit PCAP range")

    @classmethod
    def only(cls, seed: int = 7, **budgets) -> "ScenarioSpec":
        """Scenario with the given budgets and every other budget zero."""
        b = {s: 0 for s in SUBCATEGORIES}
        b.update(budgets)
        return cls(seed=seed, budgets=b)


@dataclass
class Host:
    addr: str
    ttl: int = 64
    window: int = 502
    syn_window: int = 29200
    ident: int = 0

    def next_id(self) -> int:
        self.ident = (self.ident + 1) & 0xFFFF
        return self.ident


class _Emitter:
    """Collects (t_us, frame) pairs with per-host IP id counters."""

    def __init__(self, rng: np.random.Generator, hosts: dict[str, Host]):
        self.rng = rng
        self.hosts = hosts

    def host(self, addr: str) -> Host:
        h = self.hosts.get(addr)
        if h is None:
            h = self.hosts[addr] = Host(addr, ident=int(self.rng.integers(0, 65536)))
        return h

    def tcp(self, src, dst, sport, dport, seq, ack, flags, window, payload=b"", options=b"",
            ttl=None, df=True, ident=None):
        h = self.host(src)
        seg = tcp_segment(src, dst, sport, dport, seq, ack, flags, window, payload, options)
        return frame_ipv4(src, dst, 6, seg, ttl=h.ttl if ttl is None else ttl,
                          ident=h.next_id() if ident is None else ident, df=df)

    def udp(self, src, dst, sport, dport, payload=b"", ttl=None, df=True, ident=None):
        h = self.host(src)
        return frame_ipv4(src, dst, 17, udp_datagram(src, dst, sport, dport, payload),
                          ttl=h.ttl if ttl is None else ttl,
                          ident=h.next_id() if ident is None else ident, df=df)

    def icmp_unreachable(self, src, dst, quoted_ip: bytes, code: int = 3):
        h = self.host(src)
        msg = icmp_message(3, code, bytes(4), quoted_ip[:548])
        return frame_ipv4(src, dst, 1, msg, ttl=h.ttl, ident=h.next_id(), df=False)

    def icmp_echo(self, src, dst, ident, seq, data, code=0, reply=False, tos=0, df=False):
        h = self.host(src)
        msg = icmp_message(0 if reply else 8, code, struct.pack("!HH", ident, seq), data)
        return frame_ipv4(src, dst, 1, msg, ttl=h.ttl, ident=h.next_id(), df=df, tos=tos)


class _Conn:
    """Minimal TCP connection state for emitting plausible segments."""

    def __init__(self, em: _Emitter, client: str, cport: int, server: str, sport: int):
        self.em = em
        self.c, self.cp, self.s, self.sp = client, cport, server, sport
        rng = em.rng
        self.cseq = int(rng.integers(0, 2**32))
        self.sseq = int(rng.integers(0, 2**32))

    def syn(self, window=None, options=_LINUX_SYN_OPTS):
        h = self.em.host(self.c)
        f = self.em.tcp(self.c, self.s, self.cp, self.sp, self.cseq, 0, SYN,
                        h.syn_window if window is None else window, options=options)
        self.cseq += 1
        return f

    def synack(self, options=_LINUX_SYN_OPTS):
        h = self.em.host(self.s)
        f = self.em.tcp(self.s, self.c, self.sp, self.cp, self.sseq, self.cseq, SYN | ACK,
                        h.syn_window, options=options)
        self.sseq += 1
        return f

    def send(self, from_client: bool, flags: int, payload: bytes = b"", options=_LINUX_TS_OPTS):
        if from_client:
            src, dst, sp, dp, seq, ack = self.c, self.s, self.cp, self.sp, self.cseq, self.sseq
        else:
            src, dst, sp, dp, seq, ack = self.s, self.c, self.sp, self.cp, self.sseq, self.cseq
        h = self.em.host(src)
        f = self.em.tcp(src, dst, sp, dp, seq, ack, flags, h.window, payload, options)
        adv = len(payload) + (1 if flags & (SYN | FIN) else 0)
        if from_client:
            self.cseq += adv
        else:
            self.sseq += adv
        return f


def _gap(rng, lo_us: int, hi_us: int) -> int:
    return int(rng.integers(lo_us, hi_us + 1))


def _us(seconds: float) -> int:
    return int(round(seconds * 1_000_000))


def _ephemeral(rng) -> Iterator[int]:
    port = int(rng.integers(32768, 61000))
    while True:
        yield port
        port = 32768 + (port - 32768 + 1) % (61000 - 32768)


# Each emitter yields (t_us, frame) in nondecreasing time order, indefinitely
# or until its window is exhausted; callers truncate at the budget.

def _normal(em: _Emitter, roster: Roster, t0: float, t1: float, budget: int):
    rng = em.rng
    n_flows = max(1, -(-budget // 9))
    starts = np.sort(rng.uniform(t0, t1, size=n_flows))
    ports = {d: _ephemeral(rng) for d in roster.devices}
    for dev in roster.devices:
        em.host(dev).window = int(rng.integers(220, 260))
    em.host(roster.broker).window = 227
    pending: list[tuple[int, int, bytes]] = []
    seq = 0
    for start in starts:
        dev = roster.devices[int(rng.integers(len(roster.devices)))]
        c = _Conn(em, dev, next(ports[dev]), roster.broker, MQTT_PORT)
        t = _us(start)
        pkts = [c.syn()]
        steps = [0]
        pkts.append(c.synack()); steps.append(_gap(rng, 150, 900))
        pkts.append(c.send(True, ACK)); steps.append(_gap(rng, 50, 400))
        client_id = b"dev-" + dev.rsplit(".", 1)[1].encode()
        connect = b"\x10" + bytes([12 + len(client_id)]) + b"\x00\x04MQTT\x04\x02\x00\x3c" + \
            struct.pack("!H", len(client_id)) + client_id
        pkts.append(c.send(True, PSH | ACK, connect)); steps.append(_gap(rng, 100, 600))
        pkts.append(c.send(False, PSH | ACK, b"\x20\x02\x00\x00")); steps.append(_gap(rng, 200, 1500))
        for _ in range(int(rng.integers(1, 3))):
            topic = b"home/sensor/" + client_id
            body = rng.integers(48, 123, size=int(rng.integers(4, 60)), dtype=np.uint8).tobytes()
            pub = b"\x30" + bytes([2 + len(topic) + len(body)]) + struct.pack("!H", len(topic)) + topic + body
            pkts.append(c.send(True, PSH | ACK, pub)); steps.append(_gap(rng, 1000, 20000))
            pkts.append(c.send(False, ACK)); steps.append(_gap(rng, 100, 800))
        pkts.append(c.send(True, FIN | ACK)); steps.append(_gap(rng, 500, 5000))
        pkts.append(c.send(False, FIN | ACK)); steps.append(_gap(rng, 100, 700))
        pkts.append(c.send(True, ACK)); steps.append(_gap(rng, 50, 300))
        for frame, step in zip(pkts, steps):
            t += step
            pending.append((t, seq, frame))
            seq += 1
    pending.sort()
    for t, _, frame in pending:
        yield t, frame


def _pacing(t0: float, t1: float, budget: int, per_unit: float) -> float:
    """Mean spacing in µs between units so the budget fills about half the window.

    ``per_unit`` is the fewest packets one unit (probe, flow, segment) emits.
    """
    units = max(1.0, budget / per_unit)
    return (t1 - t0) * 1e6 * 0.5 / units


def _spacing(rng, mean: float) -> int:
    # uniform on [0.5, 1.5] * mean: bounded, so small budgets cannot overrun a window
    return max(1, int(mean * (0.5 + rng.random())))


def _syn_flood(em: _Emitter, roster: Roster, bots, t0, t1, budget):
    rng = em.rng
    victim = roster.victim
    for b in bots:
        em.host(b).ttl = 64
    mean = _pacing(t0, t1, budget, 1.0)
    t = _us(t0)
    pending = []
    while t < _us(t1) and len(pending) < budget + 4:
        bot = bots[int(rng.integers(len(bots)))]
        sport = int(rng.integers(1024, 65536))
        seq = int(rng.integers(0, 2**32))
        pending.append((t, em.tcp(bot, victim, sport, HTTP_PORT, seq, 0, SYN, 512, df=False)))
        if rng.random() < 0.5:
            isn = int(rng.integers(0, 2**32))
            t2 = t + _gap(rng, 80, 600)
            pending.append((t2, em.tcp(victim, bot, HTTP_PORT, sport, isn, seq + 1, SYN | ACK, 29200,
                                       options=_LINUX_SYN_OPTS)))
            pending.append((t2 + _gap(rng, 40, 300),
                            em.tcp(bot, victim, sport, HTTP_PORT, seq + 1, 0, RST, 0, df=True)))
        t += _spacing(rng, mean)
    pending.sort(key=lambda p: p[0])
    yield from pending


def _udp_flood(em: _Emitter, roster: Roster, bots, t0, t1, budget):
    rng = em.rng
    victim = roster.victim
    mean = _pacing(t0, t1, budget, 1.0)
    t = _us(t0)
    pending = []
    while t < _us(t1) and len(pending) < budget + 2:
        bot = em.host(bots[int(rng.integers(len(bots)))])
        sport = int(rng.integers(1024, 65536))
        ident = bot.next_id()
        frame = em.udp(bot.addr, victim, sport, HTTP_PORT, b"", df=False, ident=ident)
        pending.append((t, frame))
        if rng.random() < 0.1:
            quoted = frame[14:14 + 28]
            pending.append((t + _gap(rng, 60, 400), em.icmp_unreachable(victim, bot.addr, quoted)))
        t += _spacing(rng, mean)
    pending.sort(key=lambda p: p[0])
    yield from pending


def _http_flood(em: _Emitter, roster: Roster, bots, t0, t1, budget):
    rng = em.rng
    victim = roster.victim
    em.host(victim).window = 509
    mean = _pacing(t0, t1, budget, 10.0)
    ports = {b: _ephemeral(rng) for b in bots}
    t = _us(t0)
    pending = []
    n = 0
    while t < _us(t1) and n < budget:
        bot = bots[int(rng.integers(len(bots)))]
        c = _Conn(em, bot, next(ports[bot]), victim, HTTP_PORT)
        path = f"/index.php?id={int(rng.integers(0, 100000))}".encode()
        req = (b"GET " + path + b" HTTP/1.1\r\nHost: " + victim.encode() +
               b"\r\nUser-Agent: Mozilla/5.0\r\nAccept: */*\r\nConnection: close\r\n\r\n")
        ok = rng.random() < 0.9
        body = bytes(int(rng.integers(300, 1200))) if ok else bytes(196)
        status = b"HTTP/1.1 200 OK" if ok else b"HTTP/1.1 404 Not Found"
        resp = status + b"\r\nServer: Apache\r\nContent-Type: text/html\r\nContent-Length: " + \
            str(len(body)).encode() + b"\r\n\r\n" + body
        seqs = [
            (0, c.syn()),
            (_gap(rng, 100, 700), c.synack()),
            (_gap(rng, 40, 300), c.send(True, ACK)),
            (_gap(rng, 20, 200), c.send(True, PSH | ACK, req)),
            (_gap(rng, 100, 500), c.send(False, ACK)),
            (_gap(rng, 300, 3000), c.send(False, PSH | ACK, resp)),
            (_gap(rng, 40, 300), c.send(True, ACK)),
            (_gap(rng, 50, 400), c.send(True, FIN | ACK)),
            (_gap(rng, 100, 600), c.send(False, FIN | ACK)),
            (_gap(rng, 40, 300), c.send(True, ACK)),
        ]
        tt = t
        for step, frame in seqs:
            tt += step
            pending.append((tt, frame))
        n += len(seqs)
        t += _spacing(rng, mean)
    pending.sort(key=lambda p: p[0])
    yield from pending


_OPEN_PORTS = (22, 80, 443, 1883)


def _service_scan(em: _Emitter, roster: Roster, bots, t0, t1, budget):
    rng = em.rng
    victim = roster.victim
    bot = bots[0]
    mean = _pacing(t0, t1, budget, 1.0)
    t = _us(t0)
    pending = []
    ports = np.arange(1, 1025)
    while t < _us(t1) and len(pending) < budget + 3:
        order = rng.permutation(ports)
        sport = int(rng.integers(32768, 65536))
        ttl = int(rng.integers(37, 60))
        win = int(rng.choice([1024, 2048, 3072, 4096]))
        for dport in order:
            dport = int(dport)
            if rng.random() < 0.15:
                # UDP probe; closed ports answer with ICMP port unreachable
                frame = em.udp(bot, victim, sport, dport, b"", ttl=ttl, df=False,
                               ident=int(rng.integers(0, 65536)))
                pending.append((t, frame))
                if dport not in (53, 123, 161) and rng.random() < 0.5:
                    pending.append((t + _gap(rng, 80, 500),
                                    em.icmp_unreachable(victim, bot, frame[14:14 + 28])))
            else:
                seq = int(rng.integers(0, 2**32))
                pending.append((t, em.tcp(bot, victim, sport, dport, seq, 0, SYN, win,
                                          options=_NMAP_SYN_OPTS, ttl=ttl, df=False,
                                          ident=int(rng.integers(0, 65536)))))
                t2 = t + _gap(rng, 60, 500)
                if dport in _OPEN_PORTS:
                    isn = int(rng.integers(0, 2**32))
                    pending.append((t2, em.tcp(victim, bot, dport, sport, isn, seq + 1, SYN | ACK,
                                               29200, options=_NMAP_SYN_OPTS)))
                    pending.append((t2 + _gap(rng, 30, 200),
                                    em.tcp(bot, victim, sport, dport, seq + 1, 0, RST, 0, df=True)))
                elif rng.random() < 0.9:
                    pending.append((t2, em.tcp(victim, bot, dport, sport, 0, seq + 1, RST | ACK, 0)))
            t += _spacing(rng, mean)
            if len(pending) >= budget + 3 or t >= _us(t1):
                break
    pending.sort(key=lambda p: p[0])
    yield from pending


def _os_fingerprint(em: _Emitter, roster: Roster, bots, t0, t1, budget):
    rng = em.rng
    victim = roster.victim
    bot = bots[1 % len(bots)]
    mean = _pacing(t0, t1, budget, 32.0) * 0.8
    t = _us(t0)
    pending = []
    open_port, closed_port = HTTP_PORT, 1
    syn_windows = (1, 63, 4, 4, 16, 512)
    while t < _us(t1) and len(pending) < budget:
        sport = int(rng.integers(32768, 65000))
        ttl = int(rng.integers(37, 60))
        tt = t
        # sequence-generation probes
        for i, win in enumerate(syn_windows):
            seq = int(rng.integers(0, 2**32))
            opts = bytes([3, 3, 10, 1, 2, 4, 5, 0xB4, 4, 2, 8, 10]) + bytes(8)
            pending.append((tt, em.tcp(bot, victim, sport + i, open_port, seq, 0, SYN, win,
                                       options=opts[: 4 + 4 * (i % 4)], ttl=ttl, df=False)))
            pending.append((tt + _gap(rng, 60, 400),
                            em.tcp(victim, bot, open_port, sport + i, int(rng.integers(0, 2**32)),
                                   seq + 1, SYN | ACK, 28960, options=_LINUX_SYN_OPTS)))
            tt += 100_000
        probes = [
            (open_port, SYN | ECE | CWR, 3, True),
            (open_port, 0, 128, True),
            (open_port, SYN | FIN | URG | PSH, 256, False),
            (open_port, ACK, 1024, True),
            (closed_port, SYN, 31337, False),
            (closed_port, ACK, 32768, True),
            (closed_port, FIN | PSH | URG, 65535, False),
        ]
        for j, (dport, flags, win, df) in enumerate(probes):
            seq = int(rng.integers(0, 2**32))
            p = sport + 10 + j
            pending.append((tt, em.tcp(bot, victim, p, dport, seq, 0, flags, win,
                                       options=_NMAP_SYN_OPTS, ttl=ttl, df=df)))
            t2 = tt + _gap(rng, 60, 400)
            if dport == open_port and flags & SYN:
                pending.append((t2, em.tcp(victim, bot, dport, p, int(rng.integers(0, 2**32)),
                                           seq + 1, SYN | ACK | ECE, 28960, options=_LINUX_SYN_OPTS)))
            elif flags & ACK:
                pending.append((t2, em.tcp(victim, bot, dport, p, 0, 0, RST, 0)))
            else:
                pending.append((t2, em.tcp(victim, bot, dport, p, 0, seq + 1, RST | ACK, 0)))
            tt += _gap(rng, 2000, 20000)
        # ICMP echo probes
        ident = int(rng.integers(0, 65535))
        for k, (code, size, tos) in enumerate(((9, 120, 0), (0, 150, 4))):
            data = bytes(size)
            pending.append((tt, em.icmp_echo(bot, victim, (ident + k) & 0xFFFF, 295 + k, data, code=code,
                                             tos=tos, df=(k == 0))))
            pending.append((tt + _gap(rng, 60, 300),
                            em.icmp_echo(victim, bot, (ident + k) & 0xFFFF, 295 + k, data, code=code, reply=True)))
            tt += _gap(rng, 1000, 10000)
        # UDP probe to a closed port
        frame = em.udp(bot, victim, sport + 20, 40125, b"C" * 300, ttl=ttl, df=False)
        pending.append((tt, frame))
        pending.append((tt + _gap(rng, 60, 400),
                        em.icmp_unreachable(victim, bot, frame[14:14 + 328])))
        t = max(tt, t + _spacing(rng, mean))
    pending.sort(key=lambda p: p[0])
    yield from pending


def _reverse_shell(em: _Emitter, roster: Roster, bots, t0, t1, budget, exfil: bool):
    rng = em.rng
    victim = roster.victim
    attacker = bots[2 % len(bots)]
    em.host(attacker).window = 2000 if exfil else 1800
    em.host(victim).window = 501
    pending = []
    t = _us(t0)
    end = _us(t1)
    per_segment = 1.0 if exfil else 2.0
    mean = _pacing(t0, t1, budget, per_segment)
    ports = _ephemeral(rng)
    while t < end and len(pending) < budget:
        c = _Conn(em, victim, next(ports), attacker, SHELL_PORT)
        pending.append((t, c.syn())); t += _gap(rng, 200, 2000)
        pending.append((t, c.synack())); t += _gap(rng, 50, 500)
        pending.append((t, c.send(True, ACK)))
        stream_len = int(rng.integers(600, 1200))
        for k in range(stream_len):
            t += _spacing(rng, mean)
            if exfil:
                payload = rng.integers(0, 256, size=1448 if rng.random() < 0.9 else
                                       int(rng.integers(200, 1448)), dtype=np.uint8).tobytes()
                pending.append((t, c.send(True, PSH | ACK if k % 8 == 7 else ACK, payload)))
                if k % 2:
                    pending.append((t + _gap(rng, 50, 400), c.send(False, ACK)))
            else:
                payload = rng.integers(0, 256, size=int(rng.integers(8, 120)), dtype=np.uint8).tobytes()
                pending.append((t, c.send(True, PSH | ACK, payload)))
                pending.append((t + _gap(rng, 100, 2000), c.send(False, ACK)))
                if rng.random() < 0.05:
                    cmd = rng.integers(0, 256, size=int(rng.integers(40, 90)), dtype=np.uint8).tobytes()
                    t += _gap(rng, 3000, 10000)
                    pending.append((t, c.send(False, PSH | ACK, cmd)))
                    pending.append((t + _gap(rng, 100, 800), c.send(True, ACK)))
            t = max(t, pending[-1][0])
            if len(pending) >= budget or t >= end:
                break
        t += _gap(rng, 100_000, 1_000_000)
    pending.sort(key=lambda p: p[0])
    yield from pending


def _attack_stream(sub: str, em: _Emitter, spec: ScenarioSpec, t0: float, t1: float, budget: int):
    r = spec.roster
    bots = r.bots if sub.startswith("ddos") else r.bots[:1]
    if sub.endswith("_tcp"):
        return _syn_flood(em, r, bots, t0, t1, budget)
    if sub.endswith("_udp"):
        return _udp_flood(em, r, bots, t0, t1, budget)
    if sub.endswith("_http"):
        return _http_flood(em, r, bots, t0, t1, budget)
    if sub == "service_scan":
        return _service_scan(em, r, r.bots[3:] or r.bots, t0, t1, budget)
    if sub == "os_fingerprint":
        return _os_fingerprint(em, r, r.bots, t0, t1, budget)
    if sub == "data_exfiltration":
        return _reverse_shell(em, r, r.bots, t0, t1, budget, exfil=True)
    if sub == "keylogging":
        return _reverse_shell(em, r, r.bots, t0, t1, budget, exfil=False)
    raise ValueError(sub)


def _attackers_for(sub: str, roster: Roster) -> list[str]:
    if sub.startswith("ddos"):
        return list(roster.bots)
    if sub.startswith("dos"):
        return [roster.bots[0]]
    if sub == "service_scan":
        return [(roster.bots[3:] or roster.bots)[0]]
    if sub == "os_fingerprint":
        return [roster.bots[1 % len(roster.bots)]]
    return [roster.bots[2 % len(roster.bots)]]


@dataclass
class GeneratedScenario:
    capture: Path
    rules: Path
    manifest: Path
    labels: list[str]
    counts: dict[str, int]


def generate_packets(spec: ScenarioSpec) -> tuple[list[tuple[int, bytes]], list[Optional[str]], list[dict]]:
    """Build the frame sequence in memory.

    Returns ``(packets, labels, rules)`` where ``labels`` holds the
    subcategory of each frame (None for non-IP frames such as ARP).
    """
    events = []  # (t_us, order, sub_index, frame, label)
    order = 0
    for k, sub in enumerate(SUBCATEGORIES):
        budget = int(spec.budgets.get(sub, 0))
        if budget == 0:
            continue
        rng = np.random.default_rng([spec.seed, k])
        em = _Emitter(rng, {})
        if sub == "normal":
            stream = _normal(em, spec.roster, 0.0, spec.duration, budget)
        else:
            if sub not in spec.windows:
                raise ValueError(f"no time window for {sub}")
            a, b = spec.windows[sub]
            stream = _attack_stream(sub, em, spec, a, b, budget)
        got = 0
        for t, frame in islice(stream, budget):
            events.append((t, order, frame, sub))
            order += 1
            got += 1
        if got < budget:
            raise BudgetOverflow(f"{sub}: window too short for a budget of {budget} packets")
        if sub == "normal" and spec.arp_every:
            r = np.random.default_rng([spec.seed, 99])
            for j in range(budget // spec.arp_every):
                dev = spec.roster.devices[j % len(spec.roster.devices)]
                t = int(r.uniform(0, spec.duration) * 1e6)
                events.append((t, order, arp_request(dev, spec.roster.broker), None))
                order += 1
    events.sort(key=lambda e: (e[0], e[1]))

    base = spec.base_epoch * 1_000_000
    packets, labels = [], []
    first: dict[str, int] = {}
    last: dict[str, int] = {}
    prev = -1
    for t, _, frame, sub in events:
        t = max(t, prev + 1)  # strictly increasing, µs resolution
        prev = t
        ts_us = base + t
        packets.append((ts_us * 1000, frame))
        labels.append(sub)
        if sub is not None:
            first.setdefault(sub, ts_us)
            last[sub] = ts_us

    rules = []
    spans = []
    for sub in SUBCATEGORIES:
        if sub == "normal" or sub not in first:
            continue
        start = (first[sub] - 1000) / 1e6
        end = (last[sub] + 1000) / 1e6
        spans.append((start, end, sub))
        rules.append({"subcategory": sub, "ips": _attackers_for(sub, spec.roster),
                      "start": start, "end": end})
    spans.sort()
    for (a0, a1, s1), (b0, b1, s2) in zip(spans, spans[1:]):
        if b0 <= a1:
            raise BudgetOverflow(f"attack windows of {s1} and {s2} overlap; lower the budgets")
    if packets and packets[-1][0] // 1_000_000_000 > MAX_PCAP_SECONDS:
        raise BudgetOverflow("timestamps exceed the 32-bit PCAP range")
    return packets, labels, rules


def write_rules(rules: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rules:
            fh.write(json.dumps(r) + "\n")


def write_manifest(path, spec: ScenarioSpec, labels: list[str], counts: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"seed {spec.seed}\n")
        fh.write(f"packets {len(labels)}\n")
        for sub in SUBCATEGORIES:
            fh.write(f"count {sub} {counts.get(sub, 0)}\n")
        fh.write("labels\n")
        for lab in labels:
            fh.write(lab + "\n")


def read_manifest(path) -> tuple[dict[str, int], list[str]]:
    counts, labels = {}, []
    with open(path, encoding="utf-8") as fh:
        in_labels = False
        for line in fh:
            line = line.strip()
            if in_labels:
                if line:
                    labels.append(line)
            elif line == "labels":
                in_labels = True
            elif line.startswith("count "):
                _, sub, n = line.split()
                counts[sub] = int(n)
    return counts, labels


def generate(spec: ScenarioSpec, out_dir) -> GeneratedScenario:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    packets, frame_labels, rules = generate_packets(spec)
    cap = out / "cap.pcap"
    write_pcap(cap, packets)
    labels = [lab for lab in frame_labels if lab is not None]
    counts = {sub: labels.count(sub) for sub in SUBCATEGORIES}
    rules_path = out / "rules.jsonl"
    write_rules(rules, rules_path)
    manifest = out / "manifest.txt"
    write_manifest(manifest, spec, labels, counts)
    return GeneratedScenario(cap, rules_path, manifest, labels, counts)
