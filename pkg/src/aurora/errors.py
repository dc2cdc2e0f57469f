"""Exception hierarchy and platform fault records.

Platform-level violations (memory isolation, mode switching, interrupt
routing) are returned as :class:`Fault` values so attack scenarios can
observe them and keep going.  Everything above the platform raises.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class FaultKind(enum.Enum):
    ACCESS_VIOLATION = "AccessViolation"
    OUT_OF_BOUNDS = "OutOfBounds"
    REENTRANCY = "Reentrancy"
    NOT_IN_SMM = "NotInSmm"
    UNKNOWN_VECTOR = "UnknownVector"


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    actor: object = None
    detail: str = ""

    def __str__(self) -> str:
        return f"Fault{{{self.kind.value}}} {self.detail}".strip()


class AuroraError(Exception):
    """Base class for every error raised by the simulator."""

    kind = "AuroraError"


class PlatformFault(AuroraError):
    """Raised by convenience wrappers when a platform op returned a Fault."""

    kind = "Fault"

    def __init__(self, fault: Fault):
        super().__init__(str(fault))
        self.fault = fault


class ConfigInvalid(AuroraError):
    kind = "ConfigInvalid"


# -- devices ---------------------------------------------------------------

class DeviceError(AuroraError):
    kind = "DeviceError"


class FrameTooLarge(DeviceError):
    kind = "FrameTooLarge"


class RingFull(DeviceError):
    kind = "RingFull"


# -- channel ---------------------------------------------------------------

class ChannelError(AuroraError):
    kind = "ChannelError"


class AuthFail(ChannelError):
    kind = "AuthFail"


class ReplayOrReorder(ChannelError):
    kind = "ReplayOrReorder"


class Closed(ChannelError):
    kind = "Closed"


class FifoFull(ChannelError):
    kind = "FifoFull"


class Timeout(ChannelError, TimeoutError):
    kind = "Timeout"


class AuthFailEnclave(ChannelError):
    kind = "AuthFailEnclave"


class AuthFailSsv(ChannelError):
    kind = "AuthFailSsv"


class SharedMemUnavailable(ChannelError):
    kind = "SharedMemUnavailable"


class PayloadTooLarge(ChannelError):
    kind = "PayloadTooLarge"


class RequestFailed(ChannelError):
    """The SSV answered with a non-zero status byte."""

    kind = "RequestFailed"

    def __init__(self, status: int, message: str = ""):
        super().__init__(message or f"SSV returned status {status}")
        self.status = status


# -- supervisor ------------------------------------------------------------

class SsvError(AuroraError):
    kind = "SsvError"


class UnknownDevice(SsvError):
    kind = "UnknownDevice"


class OperationUnsupported(SsvError):
    kind = "OperationUnsupported"


class DriverError(SsvError):
    kind = "DriverError"


class OutOfMemory(SsvError):
    kind = "OutOfMemory"


class BoundaryViolation(SsvError):
    kind = "BoundaryViolation"


# -- time ------------------------------------------------------------------

class SourceUnavailable(AuroraError):
    kind = "SourceUnavailable"


class AttackDetected(AuroraError):
    kind = "AttackDetected"

    def __init__(self, verdict):
        names = ", ".join(f"{v.source}:{v.rule}" for v in verdict.violations)
        super().__init__(f"time attack detected ({names})")
        self.verdict = verdict


# -- network ---------------------------------------------------------------

class NetError(AuroraError):
    kind = "NetError"


class ProbeFailed(NetError):
    kind = "ProbeFailed"


class TagCollision(NetError):
    kind = "TagCollision"


class ConnRefused(NetError, ConnectionRefusedError):
    kind = "ConnRefused"


class NetTimeout(NetError, TimeoutError):
    kind = "Timeout"


class WouldBlock(NetError, BlockingIOError):
    kind = "WouldBlock"


class SocketClosed(NetError):
    kind = "Closed"


class AddressInUse(NetError, OSError):
    kind = "AddressInUse"
