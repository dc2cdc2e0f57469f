"""Enclave runtime model: identity, EPC-resident secrets, attestation quotes."""

from __future__ import annotations

import hashlib
import hmac
import random
from contextlib import contextmanager
from dataclasses import dataclass

from .platform import Platform, Protected, enclave_actor

EPID_SIZE = 16
KEY_SLOT = 0            # EPC offset of the session key area (8 slots x 32 bytes)
KEY_SLOTS = 8


@dataclass(frozen=True)
class Quote:
    epid: bytes
    measurement: bytes
    nonce: bytes
    mac: bytes


def quote_mac(attestation_key: bytes, epid: bytes, measurement: bytes, nonce: bytes) -> bytes:
    return hmac.new(attestation_key, epid + measurement + nonce, hashlib.sha256).digest()


class Enclave:
    def __init__(self, platform: Platform, eid: int, *, epid: bytes | None = None,
                 code: bytes = b"aurora-enclave", seed: int = 0):
        self.platform = platform
        self.eid = eid
        self.actor = enclave_actor(eid)
        self.epc = platform.create_epc(eid)
        self.rng = random.Random(f"enclave:{eid}:{seed}")
        self.epid = epid if epid is not None else self.rng.randbytes(EPID_SIZE)
        self.measurement = hashlib.sha256(code).digest()
        self._free_slots = list(range(KEY_SLOTS))
        # stands in for the CPU-fused attestation key; set by the machine
        self._attestation_key: bytes | None = None

    @property
    def epid_low16(self) -> int:
        return int.from_bytes(self.epid[-2:], "big")

    def random_bytes(self, n: int) -> bytes:
        """In-enclave entropy (RDRAND); never sourced from the OS."""
        return self.rng.randbytes(n)

    @contextmanager
    def running(self):
        """Execute the body in this enclave's context (EENTER ... EEXIT)."""
        prev = self.platform.mode
        if prev == Protected(self.eid):
            yield
            return
        self.platform.enter_enclave(self.eid)
        try:
            yield
        finally:
            if not self.platform.in_smm:
                self.platform.mode = prev

    def quote(self, nonce: bytes) -> Quote:
        key = self._attestation_key or bytes(32)
        return Quote(self.epid, self.measurement, nonce,
                     quote_mac(key, self.epid, self.measurement, nonce))

    # -- key slots in EPC -------------------------------------------------------

    def store_key(self, key: bytes) -> int:
        if not self._free_slots:
            raise MemoryError("no free key slot in EPC")
        slot = self._free_slots.pop(0)
        with self.running():
            self.platform.write(self.actor, self.epc, KEY_SLOT + slot * 32, key, tag="key")
        return slot

    def load_key(self, slot: int) -> bytes:
        with self.running():
            return self.platform.read(self.actor, self.epc, KEY_SLOT + slot * 32, 32)

    def zeroize_key(self, slot: int) -> None:
        with self.running():
            self.platform.write(self.actor, self.epc, KEY_SLOT + slot * 32, bytes(32), tag="key")
        self._free_slots.append(slot)
        self._free_slots.sort()
