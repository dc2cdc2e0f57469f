"""Wire formats: Ethernet II, ARP, IPv4 (with options), ICMP echo, UDP, TCP.

Parsers return None on anything malformed rather than raising; the stack
counts such frames as drops.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field

ETH_IPV4 = 0x0800
ETH_ARP = 0x0806
BROADCAST_MAC = b"\xff" * 6

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

ICMP_ECHO_REPLY = 0
ICMP_ECHO_REQUEST = 8

FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10

_ETH = struct.Struct("!6s6sH")
_ARP = struct.Struct("!HHBBH6s4s6s4s")
_IP = struct.Struct("!BBHHHBBH4s4s")
_ICMP = struct.Struct("!BBHHH")
_UDP = struct.Struct("!HHHH")
_TCP = struct.Struct("!HHIIBBHHH")


def ip_bytes(addr) -> bytes:
    if isinstance(addr, bytes):
        return addr
    return ipaddress.IPv4Address(addr).packed


def ip_str(addr: bytes) -> str:
    return str(ipaddress.IPv4Address(addr))


def checksum(data: bytes) -> int:
    """Internet checksum (ones' complement sum of 16-bit words)."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _pseudo(src: bytes, dst: bytes, proto: int, length: int) -> bytes:
    return src + dst + struct.pack("!BBH", 0, proto, length)


# -- Ethernet -------------------------------------------------------------------

@dataclass(frozen=True)
class Ethernet:
    dst: bytes
    src: bytes
    ethertype: int
    payload: bytes

    def pack(self) -> bytes:
        return _ETH.pack(self.dst, self.src, self.ethertype) + self.payload

    @classmethod
    def parse(cls, frame: bytes) -> "Ethernet | None":
        if len(frame) < _ETH.size:
            return None
        dst, src, ethertype = _ETH.unpack_from(frame)
        return cls(dst, src, ethertype, frame[_ETH.size:])


# -- ARP ------------------------------------------------------------------------

@dataclass(frozen=True)
class Arp:
    op: int
    sender_mac: bytes
    sender_ip: bytes
    target_mac: bytes
    target_ip: bytes

    def pack(self) -> bytes:
        return _ARP.pack(1, ETH_IPV4, 6, 4, self.op, self.sender_mac, self.sender_ip,
                         self.target_mac, self.target_ip)

    @classmethod
    def parse(cls, data: bytes) -> "Arp | None":
        if len(data) < _ARP.size:
            return None
        _htype, _ptype, _hlen, _plen, op, smac, sip, tmac, tip = _ARP.unpack_from(data)
        return cls(op, smac, sip, tmac, tip)


def gratuitous_arp(mac: bytes, ip: bytes) -> bytes:
    arp = Arp(1, mac, ip, bytes(6), ip)
    return Ethernet(BROADCAST_MAC, mac, ETH_ARP, arp.pack()).pack()


# -- IPv4 -----------------------------------------------------------------------

@dataclass(frozen=True)
class IPv4:
    src: bytes
    dst: bytes
    proto: int
    payload: bytes
    options: bytes = b""
    ident: int = 0
    ttl: int = 64
    dont_fragment: bool = False
    more_fragments: bool = False
    frag_offset: int = 0          # in bytes, multiple of 8

    @property
    def header_len(self) -> int:
        return 20 + -(-len(self.options) // 4) * 4

    def pack(self) -> bytes:
        options = self.options.ljust(self.header_len - 20, b"\x00")
        flags = (0x4000 if self.dont_fragment else 0) | (0x2000 if self.more_fragments else 0)
        header = _IP.pack(0x40 | self.header_len // 4, 0, self.header_len + len(self.payload),
                          self.ident, flags | self.frag_offset // 8, self.ttl, self.proto, 0,
                          self.src, self.dst) + options
        csum = checksum(header)
        return header[:10] + struct.pack("!H", csum) + header[12:] + self.payload

    @classmethod
    def parse(cls, data: bytes) -> "IPv4 | None":
        if len(data) < 20:
            return None
        vihl, _tos, total, ident, frag, ttl, proto, _csum, src, dst = _IP.unpack_from(data)
        ihl = (vihl & 0x0F) * 4
        if vihl >> 4 != 4 or ihl < 20 or total < ihl or len(data) < total:
            return None
        if checksum(data[:ihl]) != 0:
            return None
        return cls(src, dst, proto, data[ihl:total], data[20:ihl], ident, ttl,
                   bool(frag & 0x4000), bool(frag & 0x2000), (frag & 0x1FFF) * 8)

    def fragments(self, mtu: int) -> list["IPv4"]:
        """Split to fit mtu.  Options are copied into every fragment."""
        room = (mtu - self.header_len) // 8 * 8
        if self.header_len + len(self.payload) <= mtu:
            return [self]
        if self.dont_fragment or room <= 0:
            raise ValueError("datagram exceeds MTU and may not be fragmented")
        out = []
        for start in range(0, len(self.payload), room):
            chunk = self.payload[start:start + room]
            last = start + room >= len(self.payload)
            out.append(IPv4(self.src, self.dst, self.proto, chunk, self.options, self.ident,
                            self.ttl, False, (not last) or self.more_fragments,
                            self.frag_offset + start))
        return out


def split_options(options: bytes) -> list[bytes]:
    """Option TLVs in order; stops at end-of-list or a malformed entry."""
    out, i = [], 0
    while i < len(options):
        kind = options[i]
        if kind == 0:
            break
        if kind == 1:
            i += 1
            continue
        if i + 1 >= len(options) or options[i + 1] < 2:
            break
        length = options[i + 1]
        out.append(options[i:i + length])
        i += length
    return out


@dataclass
class _Partial:
    chunks: dict = field(default_factory=dict)
    total: int | None = None
    first: IPv4 | None = None
    started: int = 0


class Reassembler:
    """Collects fragments keyed by (src, dst, proto, ident)."""

    def __init__(self, timeout_ns: int, limit: int = 64):
        self.timeout_ns = timeout_ns
        self.limit = limit
        self.partial: dict[tuple, _Partial] = {}
        self.expired = 0

    def push(self, packet: IPv4, now: int) -> IPv4 | None:
        if not packet.more_fragments and packet.frag_offset == 0:
            return packet
        self._expire(now)
        key = (packet.src, packet.dst, packet.proto, packet.ident)
        entry = self.partial.get(key)
        if entry is None:
            if len(self.partial) >= self.limit:
                return None
            entry = self.partial[key] = _Partial(started=now)
        entry.chunks[packet.frag_offset] = packet.payload
        if packet.frag_offset == 0:
            entry.first = packet
        if not packet.more_fragments:
            entry.total = packet.frag_offset + len(packet.payload)
        if entry.total is None or entry.first is None:
            return None
        data, pos = bytearray(), 0
        for offset in sorted(entry.chunks):
            if offset != pos:
                return None
            data += entry.chunks[offset]
            pos += len(entry.chunks[offset])
        if pos != entry.total:
            return None
        del self.partial[key]
        first = entry.first
        return IPv4(first.src, first.dst, first.proto, bytes(data), first.options,
                    first.ident, first.ttl)

    def _expire(self, now: int) -> None:
        for key in [k for k, e in self.partial.items() if now - e.started > self.timeout_ns]:
            del self.partial[key]
            self.expired += 1


# -- ICMP -----------------------------------------------------------------------

@dataclass(frozen=True)
class IcmpEcho:
    type: int
    ident: int
    seq: int
    payload: bytes
    code: int = 0

    def pack(self) -> bytes:
        raw = _ICMP.pack(self.type, self.code, 0, self.ident, self.seq) + self.payload
        return raw[:2] + struct.pack("!H", checksum(raw)) + raw[4:]

    @classmethod
    def parse(cls, data: bytes) -> "IcmpEcho | None":
        if len(data) < _ICMP.size or checksum(data) != 0:
            return None
        kind, code, _csum, ident, seq = _ICMP.unpack_from(data)
        return cls(kind, ident, seq, data[_ICMP.size:], code)


# -- UDP ------------------------------------------------------------------------

@dataclass(frozen=True)
class Udp:
    sport: int
    dport: int
    payload: bytes

    def pack(self, src: bytes, dst: bytes) -> bytes:
        length = _UDP.size + len(self.payload)
        raw = _UDP.pack(self.sport, self.dport, length, 0) + self.payload
        csum = checksum(_pseudo(src, dst, PROTO_UDP, length) + raw) or 0xFFFF
        return raw[:6] + struct.pack("!H", csum) + raw[8:]

    @classmethod
    def parse(cls, data: bytes, src: bytes, dst: bytes) -> "Udp | None":
        if len(data) < _UDP.size:
            return None
        sport, dport, length, csum = _UDP.unpack_from(data)
        if length < _UDP.size or length > len(data):
            return None
        if csum and checksum(_pseudo(src, dst, PROTO_UDP, length) + data[:length]) != 0:
            return None
        return cls(sport, dport, data[_UDP.size:length])


# -- TCP ------------------------------------------------------------------------

@dataclass(frozen=True)
class Tcp:
    sport: int
    dport: int
    seq: int
    ack: int
    flags: int
    window: int
    payload: bytes = b""

    @property
    def seg_len(self) -> int:
        """Sequence space consumed: data plus one for each of SYN and FIN."""
        return len(self.payload) + bool(self.flags & SYN) + bool(self.flags & FIN)

    def pack(self, src: bytes, dst: bytes) -> bytes:
        raw = _TCP.pack(self.sport, self.dport, self.seq, self.ack, 5 << 4, self.flags,
                        self.window, 0, 0) + self.payload
        csum = checksum(_pseudo(src, dst, PROTO_TCP, len(raw)) + raw)
        return raw[:16] + struct.pack("!H", csum) + raw[18:]

    @classmethod
    def parse(cls, data: bytes, src: bytes, dst: bytes) -> "Tcp | None":
        if len(data) < _TCP.size:
            return None
        sport, dport, seq, ack, off, flags, window, _csum, _urg = _TCP.unpack_from(data)
        hlen = (off >> 4) * 4
        if hlen < _TCP.size or hlen > len(data):
            return None
        if checksum(_pseudo(src, dst, PROTO_TCP, len(data)) + data) != 0:
            return None
        return cls(sport, dport, seq, ack, flags & 0x3F, window, data[hlen:])

    def describe(self) -> str:
        names = [n for bit, n in ((SYN, "S"), (ACK, "A"), (FIN, "F"), (RST, "R"), (PSH, "P"))
                 if self.flags & bit]
        return f"{self.sport}>{self.dport} [{''.join(names)}] seq={self.seq} ack={self.ack}"
