"""Flow tags and the supervisor's flow table.

Each enclave stack marks its IPv4 packets with a 4-byte option.  Per-enclave
tags use option type 0x88 (copy flag set, so fragments keep it), length 4
and the low 16 bits of the enclave's EPID.  The all-zero pattern is also
accepted for a single legacy stack.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import TagCollision

TAG_OPTION_TYPE = 0x88
TAG_LEN = 4
DEFAULT_PATTERN = b"\x00\x00\x00\x00"


def flow_tag(epid: bytes) -> bytes:
    return bytes([TAG_OPTION_TYPE, TAG_LEN]) + epid[-2:]


@dataclass(frozen=True)
class FlowEntry:
    epid: bytes
    session_id: int
    tag: bytes
    ipv4: bytes
    notify_vector: int | None = None


def ipv4_options(frame: bytes) -> tuple[bytes, bytes] | None:
    """(options, destination address) of an Ethernet/IPv4 frame, else None."""
    if len(frame) < 34 or frame[12:14] != b"\x08\x00":
        return None
    ihl = (frame[14] & 0x0F) * 4
    if frame[14] >> 4 != 4 or ihl < 20 or len(frame) < 14 + ihl:
        return None
    return frame[34:14 + ihl], frame[30:34]


def carries_tag(options: bytes, tag: bytes) -> bool:
    return any(options[i:i + TAG_LEN] == tag for i in range(0, len(options) - TAG_LEN + 1, 4))


class FlowTable:
    def __init__(self):
        self.entries: dict[bytes, FlowEntry] = {}

    def __contains__(self, epid: bytes) -> bool:
        return epid in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def register(self, entry: FlowEntry) -> None:
        for other in self.entries.values():
            if other.epid != entry.epid and (other.tag == entry.tag or other.ipv4 == entry.ipv4):
                raise TagCollision(f"tag {entry.tag.hex()} or address already in use")
        self.entries[entry.epid] = entry

    def unregister(self, epid: bytes) -> FlowEntry | None:
        return self.entries.pop(epid, None)

    def by_session(self, session_id: int) -> FlowEntry | None:
        for entry in self.entries.values():
            if entry.session_id == session_id:
                return entry
        return None

    def classify(self, frame: bytes) -> FlowEntry | None:
        """The stack a received frame belongs to: its tag and address must both match."""
        parsed = ipv4_options(frame)
        if parsed is None:
            return None
        options, dst = parsed
        for entry in self.entries.values():
            if dst == entry.ipv4 and carries_tag(options, entry.tag):
                return entry
        return None
