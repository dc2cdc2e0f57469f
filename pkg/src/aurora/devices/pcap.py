"""Minimal libpcap writer/reader (Ethernet link type, microsecond stamps)."""

from __future__ import annotations

import struct

MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
_GLOBAL = struct.Struct("<IHHiIII")
_RECORD = struct.Struct("<IIII")


def write_pcap(path, records, snaplen: int = 65535) -> int:
    """Write (virtual-ns timestamp, frame) records; returns the record count."""
    with open(path, "wb") as fh:
        fh.write(_GLOBAL.pack(MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        for ts_ns, frame in records:
            sec, rem = divmod(ts_ns, 1_000_000_000)
            fh.write(_RECORD.pack(sec, rem // 1000, len(frame), len(frame)))
            fh.write(frame)
    return len(records)


def read_pcap(path) -> list[tuple[int, bytes]]:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, *_rest = _GLOBAL.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError("not a little-endian microsecond pcap file")
    off = _GLOBAL.size
    out = []
    while off < len(data):
        sec, usec, incl, _orig = _RECORD.unpack_from(data, off)
        off += _RECORD.size
        out.append((sec * 1_000_000_000 + usec * 1000, data[off:off + incl]))
        off += incl
    return out
