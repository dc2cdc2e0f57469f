from .ca import CertificateAuthority, SessionGrant, SsvToken
from .fifo import Fifo
from .frames import (FRAME_SIZE, MAX_PAYLOAD, Device, Direction, Operation, PlainFrame,
                     SealedFrame, Status, open_sealed, seal)
from .session import IMMEDIATE, Batched, Immediate, Pending, Session, SessionState, establish

__all__ = [
    "CertificateAuthority", "SessionGrant", "SsvToken", "Fifo", "FRAME_SIZE", "MAX_PAYLOAD",
    "Device", "Direction", "Operation", "PlainFrame", "SealedFrame", "Status", "open_sealed",
    "seal", "IMMEDIATE", "Batched", "Immediate", "Pending", "Session", "SessionState",
    "establish",
]
