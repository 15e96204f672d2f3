"""Ethernet / IPv4 / TCP header parsing and frame construction."""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass

ETH_HEADER = 14
ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6

FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10


class FrameError(ValueError):
    pass


class TruncatedFrame(FrameError):
    pass


@dataclass(frozen=True)
class Ethernet:
    dst: bytes
    src: bytes
    ethertype: int


@dataclass(frozen=True)
class IPv4:
    src: str
    dst: str
    protocol: int
    total_length: int
    header_length: int


@dataclass(frozen=True)
class TCP:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: int
    header_length: int


@dataclass
class ParsedPacket:
    eth: Ethernet
    ipv4: IPv4 | None = None
    tcp: TCP | None = None
    payload_start: int = 0
    payload_end: int = 0
    opcua_tag: bool = False

    def payload(self, frame: bytes) -> bytes:
        return frame[self.payload_start : self.payload_end]

    @property
    def flow(self) -> tuple[str, int, str, int] | None:
        if self.ipv4 is None or self.tcp is None:
            return None
        return (self.ipv4.src, self.tcp.src_port, self.ipv4.dst, self.tcp.dst_port)


def parse_headers(frame: bytes) -> ParsedPacket:
    """Parse Ethernet, and IPv4+TCP when present. Never reads out of bounds."""
    if len(frame) < ETH_HEADER:
        raise TruncatedFrame(f"{len(frame)} bytes is shorter than an Ethernet header")
    eth = Ethernet(bytes(frame[0:6]), bytes(frame[6:12]), struct.unpack_from("!H", frame, 12)[0])
    pkt = ParsedPacket(eth)
    if eth.ethertype != ETHERTYPE_IPV4:
        return pkt
    ip_off = ETH_HEADER
    if len(frame) < ip_off + 20:
        raise TruncatedFrame("truncated IPv4 header")
    ver_ihl = frame[ip_off]
    if ver_ihl >> 4 != 4:
        return pkt
    ihl = (ver_ihl & 0x0F) * 4
    total_length = struct.unpack_from("!H", frame, ip_off + 2)[0]
    if ihl < 20 or len(frame) < ip_off + ihl:
        raise TruncatedFrame("bad IPv4 header length")
    if total_length < ihl or len(frame) < ip_off + total_length:
        raise TruncatedFrame("IPv4 total length exceeds frame")
    protocol = frame[ip_off + 9]
    src = str(ipaddress.IPv4Address(bytes(frame[ip_off + 12 : ip_off + 16])))
    dst = str(ipaddress.IPv4Address(bytes(frame[ip_off + 16 : ip_off + 20])))
    pkt.ipv4 = IPv4(src, dst, protocol, total_length, ihl)
    if protocol != PROTO_TCP:
        return pkt
    tcp_off = ip_off + ihl
    ip_end = ip_off + total_length
    if ip_end < tcp_off + 20:
        raise TruncatedFrame("truncated TCP header")
    sport, dport, seq, ack, off_flags = struct.unpack_from("!HHIIH", frame, tcp_off)
    thl = (off_flags >> 12) * 4
    if thl < 20 or tcp_off + thl > ip_end:
        raise TruncatedFrame("bad TCP data offset")
    pkt.tcp = TCP(sport, dport, seq, ack, off_flags & 0x3F, thl)
    pkt.payload_start = tcp_off + thl
    pkt.payload_end = ip_end
    return pkt


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def build_tcp_frame(
    src: str,
    sport: int,
    dst: str,
    dport: int,
    seq: int,
    ack: int = 0,
    flags: int = ACK | PSH,
    payload: bytes = b"",
    src_mac: bytes = b"\x02\x00\x00\x00\x00\x01",
    dst_mac: bytes = b"\x02\x00\x00\x00\x00\x02",
) -> bytes:
    src_ip = ipaddress.IPv4Address(src).packed
    dst_ip = ipaddress.IPv4Address(dst).packed
    tcp_hdr = struct.pack("!HHIIHHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                          (5 << 12) | flags, 65535, 0, 0)
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, PROTO_TCP, len(tcp_hdr) + len(payload))
    csum = _checksum(pseudo + tcp_hdr + payload)
    tcp_hdr = tcp_hdr[:16] + struct.pack("!H", csum) + tcp_hdr[18:]
    total = 20 + len(tcp_hdr) + len(payload)
    ip_hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0x4000, 64, PROTO_TCP, 0,
                         src_ip, dst_ip)
    ip_hdr = ip_hdr[:10] + struct.pack("!H", _checksum(ip_hdr)) + ip_hdr[12:]
    eth = dst_mac + src_mac + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip_hdr + tcp_hdr + payload
