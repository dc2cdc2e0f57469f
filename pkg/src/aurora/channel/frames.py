"""Fixed-size sealed frames.

Wire layout of one SealedFrame (always 4096 bytes, page aligned in shared
memory)::

    0      12                                   4080      4096
    | nonce | ciphertext (4068)                  | GCM tag |

    nonce = direction (1) | 00 00 00 (3) | seq (8, big endian)

The 4068-byte plaintext is a PlainFrame::

    session_id u32 | seq u64 | device u8 | operation u8 | status u8 |
    payload_len u16 | payload (<= 4051) | zero padding

All integers are big endian.  AES-256-GCM with an empty AAD; the direction
and sequence number are bound through the nonce.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import AuthFail, PayloadTooLarge

FRAME_SIZE = 4096
NONCE_SIZE = 12
TAG_SIZE = 16
CIPHERTEXT_SIZE = FRAME_SIZE - NONCE_SIZE - TAG_SIZE   # 4068
HEADER = struct.Struct(">IQBBBH")
HEADER_SIZE = HEADER.size                                 # 17
MAX_PAYLOAD = CIPHERTEXT_SIZE - HEADER_SIZE               # 4051
KEY_SIZE = 32


class Direction(enum.IntEnum):
    TO_SSV = 1
    FROM_SSV = 2
    EVENT = 3


class Operation(enum.IntEnum):
    PROBE = 0
    READ = 1
    WRITE = 2


class Device(enum.IntEnum):
    CONTROL = 0
    CLOCK = 1
    NIC = 2


class Status(enum.IntEnum):
    OK = 0
    UNKNOWN_DEVICE = 1
    OPERATION_UNSUPPORTED = 2
    DRIVER_ERROR = 3
    BOUNDARY_VIOLATION = 4
    OUT_OF_MEMORY = 5
    TAG_COLLISION = 6
    FRAME_TOO_LARGE = 7
    RING_FULL = 8


@dataclass(frozen=True)
class PlainFrame:
    session_id: int
    seq: int
    device: int
    operation: int
    status: int = 0
    payload: bytes = b""

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload {len(self.payload)} > {MAX_PAYLOAD}")

    def pack(self) -> bytes:
        head = HEADER.pack(self.session_id, self.seq, self.device, self.operation,
                           self.status, len(self.payload))
        return (head + self.payload).ljust(CIPHERTEXT_SIZE, b"\x00")

    @classmethod
    def unpack(cls, data: bytes) -> "PlainFrame":
        if len(data) != CIPHERTEXT_SIZE:
            raise AuthFail(f"plaintext length {len(data)}")
        sid, seq, device, op, status, n = HEADER.unpack_from(data)
        if n > MAX_PAYLOAD:
            raise AuthFail(f"payload_len {n} out of range")
        return cls(sid, seq, device, op, status, bytes(data[HEADER_SIZE:HEADER_SIZE + n]))


@dataclass(frozen=True)
class SealedFrame:
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedFrame":
        if len(data) != FRAME_SIZE:
            raise AuthFail(f"sealed frame length {len(data)}")
        return cls(bytes(data[:NONCE_SIZE]), bytes(data[NONCE_SIZE:-TAG_SIZE]),
                   bytes(data[-TAG_SIZE:]))

    @property
    def direction(self) -> int:
        return self.nonce[0]

    @property
    def seq(self) -> int:
        return int.from_bytes(self.nonce[4:], "big")


def make_nonce(direction: int, seq: int) -> bytes:
    return bytes([direction]) + b"\x00\x00\x00" + seq.to_bytes(8, "big")


def parse_nonce(nonce: bytes) -> tuple[int, int]:
    return nonce[0], int.from_bytes(nonce[4:12], "big")


def aead_encrypt(key: bytes, nonce: bytes, data: bytes, aad: bytes | None = None) -> bytes:
    """AES-GCM; returns ciphertext || tag."""
    return AESGCM(key).encrypt(nonce, data, aad)


def aead_decrypt(key: bytes, nonce: bytes, data: bytes, aad: bytes | None = None) -> bytes:
    try:
        return AESGCM(key).decrypt(nonce, data, aad)
    except InvalidTag:
        raise AuthFail("tag mismatch") from None


def seal(key: bytes, direction: int, plain: PlainFrame) -> bytes:
    nonce = make_nonce(direction, plain.seq)
    return nonce + aead_encrypt(key, nonce, plain.pack())


def open_sealed(key: bytes, frame: bytes) -> tuple[int, PlainFrame]:
    """Verify and decrypt; returns (direction, plain).  Any tampering is AuthFail."""
    if len(frame) != FRAME_SIZE:
        raise AuthFail(f"sealed frame length {len(frame)}")
    nonce = bytes(frame[:NONCE_SIZE])
    if nonce[1:4] != b"\x00\x00\x00":
        raise AuthFail("malformed nonce")
    data = aead_decrypt(key, nonce, bytes(frame[NONCE_SIZE:]))
    plain = PlainFrame.unpack(data)
    direction, seq = parse_nonce(nonce)
    if seq != plain.seq:
        raise AuthFail("nonce/header sequence mismatch")
    return direction, plain
