"""Known-answer check of the channel AEAD against the published AES-256-GCM
test vectors (cases 13 to 16 of the GCM submission)."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import AuthFail
from .frames import aead_decrypt, aead_encrypt

_K = bytes.fromhex("feffe9928665731c6d6a8f9467308308" * 2)
_IV = bytes.fromhex("cafebabefacedbaddecaf888")
_P = bytes.fromhex(
    "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
    "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255")
_C = bytes.fromhex(
    "522dc1f099567d07f47f37a32a84427d643a8cdcbfe5c0c97598a2bd2555d1aa"
    "8cb08e48590dbb3da7b08b1056828838c5f61e6393ba7a0abcc9f662898015ad")


@dataclass(frozen=True)
class Vector:
    name: str
    key: bytes
    iv: bytes
    plaintext: bytes
    aad: bytes
    ciphertext: bytes
    tag: bytes


VECTORS = (
    Vector("gcm-13", bytes(32), bytes(12), b"", b"", b"",
           bytes.fromhex("530f8afbc74536b9a963b4f1c4cb738b")),
    Vector("gcm-14", bytes(32), bytes(12), bytes(16), b"",
           bytes.fromhex("cea7403d4d606b6e074ec5d3baf39d18"),
           bytes.fromhex("d0d1c8a799996bf0265b98b5d48ab919")),
    Vector("gcm-15", _K, _IV, _P, b"", _C, bytes.fromhex("b094dac5d93471bdec1a502270e3cc6c")),
    Vector("gcm-16", _K, _IV, _P[:60], bytes.fromhex("feedfacedeadbeeffeedfacedeadbeefabaddad2"),
           _C[:60], bytes.fromhex("76fc6ece0f4e1768cddf8853bb2d551b")),
)


def check(vector: Vector) -> list[str]:
    """Problems found with one vector; empty when it passes."""
    problems = []
    aad = vector.aad or None
    out = aead_encrypt(vector.key, vector.iv, vector.plaintext, aad)
    if out[:-16] != vector.ciphertext:
        problems.append(f"{vector.name}: ciphertext mismatch")
    if out[-16:] != vector.tag:
        problems.append(f"{vector.name}: tag mismatch")
    if aead_decrypt(vector.key, vector.iv, vector.ciphertext + vector.tag, aad) != vector.plaintext:
        problems.append(f"{vector.name}: decryption mismatch")
    forged = bytearray(vector.ciphertext + vector.tag)
    forged[-1] ^= 1
    try:
        aead_decrypt(vector.key, vector.iv, bytes(forged), aad)
        problems.append(f"{vector.name}: forged tag accepted")
    except AuthFail:
        pass
    return problems


def self_test() -> list[str]:
    return [p for v in VECTORS for p in check(v)]
