"""Simulated certificate authority brokering session keys.

The CA stands in for the remote attestation service.  It knows the hardware
attestation key (to check enclave quotes), the BIOS signing key (to check
SSV image tokens), the genuine SSV image hash and the registered enclaves.
Keys travel to the SSV over an out-of-band mailbox the OS cannot read.
"""

from __future__ import annotations

import hashlib
import hmac
import itertools
from dataclasses import dataclass

from ..enclave import Quote, quote_mac
from ..errors import AuthFailEnclave, AuthFailSsv


@dataclass(frozen=True)
class SsvToken:
    image_hash: bytes
    signature: bytes


def sign_image(bios_key: bytes, image_hash: bytes) -> bytes:
    return hmac.new(bios_key, image_hash, hashlib.sha256).digest()


@dataclass(frozen=True)
class SessionGrant:
    """What the SSV needs to serve a new session."""

    session_id: int
    epid: bytes
    key: bytes
    to_ssv_base: int
    from_ssv_base: int
    capacity: int
    replaces: int | None = None


class CertificateAuthority:
    def __init__(self, attestation_key: bytes, bios_key: bytes, ssv_image_hash: bytes):
        self._attestation_key = attestation_key
        self._bios_key = bios_key
        self.ssv_image_hash = ssv_image_hash
        self.registered: dict[bytes, bytes] = {}     # epid -> measurement
        self._ids = itertools.count(1)
        self.log: list[tuple[str, str]] = []
        self.ssv = None          # mailbox endpoint registered by the BIOS at startup

    def attach_ssv(self, ssv) -> None:
        self.ssv = ssv

    def register_enclave(self, epid: bytes, measurement: bytes) -> None:
        self.registered[epid] = measurement

    def verify_enclave(self, quote: Quote, nonce: bytes) -> None:
        expected = self.registered.get(quote.epid)
        if expected is None:
            self.log.append(("reject-enclave", quote.epid.hex()))
            raise AuthFailEnclave(f"epid {quote.epid.hex()} not registered")
        good_mac = quote_mac(self._attestation_key, quote.epid, quote.measurement, nonce)
        if (quote.nonce != nonce or quote.measurement != expected
                or not hmac.compare_digest(good_mac, quote.mac)):
            self.log.append(("reject-enclave", quote.epid.hex()))
            raise AuthFailEnclave("quote does not verify")

    def verify_ssv(self, token: SsvToken) -> None:
        good = sign_image(self._bios_key, token.image_hash)
        if token.image_hash != self.ssv_image_hash or not hmac.compare_digest(good,
                                                                              token.signature):
            self.log.append(("reject-ssv", token.image_hash.hex()))
            raise AuthFailSsv("SSV image token does not match the registered image")

    def broker(self, quote: Quote, nonce: bytes, token: SsvToken, key: bytes,
               to_ssv_base: int, from_ssv_base: int, capacity: int, *,
               replaces: int | None = None) -> SessionGrant:
        """Verify both identities, then hand the enclave's key to the SSV."""
        self.verify_enclave(quote, nonce)
        self.verify_ssv(token)
        grant = SessionGrant(next(self._ids), quote.epid, key, to_ssv_base, from_ssv_base,
                             capacity, replaces)
        self.ssv.deliver_grant(grant)
        self.log.append(("session", str(grant.session_id)))
        return grant
