"""The simulated machine.

One logical CPU with explicit mode switching between protected mode (OS or
enclave context) and SMM, four kinds of memory domain with enforced access
rules, and an interrupt redirection table.  All actors are driven
cooperatively; the :class:`Platform` instance is the single serialization
point and must not be shared across threads.
"""

from __future__ import annotations

import enum
import hashlib
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .costs import CostTable
from .errors import Fault, FaultKind, PlatformFault

KIB = 1024
MIB = 1024 * 1024
PAGE = 4096


# -- actors ------------------------------------------------------------------

@dataclass(frozen=True)
class Actor:
    kind: str
    enclave: int | None = None

    def __str__(self) -> str:
        return self.kind if self.enclave is None else f"enclave{self.enclave}"


OS = Actor("os")
ADVERSARY = Actor("adversary")
SSV = Actor("ssv")


def enclave_actor(eid: int) -> Actor:
    return Actor("enclave", eid)


# -- memory ----------------------------------------------------------------

class DomainKind(enum.Enum):
    SMRAM = "Smram"
    EPC = "Epc"
    SHARED = "SharedRam"
    UNTRUSTED = "UntrustedRam"


class Op(enum.Enum):
    READ = "Read"
    WRITE = "Write"


@dataclass(eq=False)
class MemoryDomain:
    kind: DomainKind
    base: int
    size: int
    enclave: int | None = None
    contents: bytearray = field(default=None, repr=False)

    def __post_init__(self):
        if self.contents is None:
            self.contents = bytearray(self.size)

    @property
    def name(self) -> str:
        if self.kind is DomainKind.EPC:
            return f"Epc({self.enclave})"
        return self.kind.value


# -- execution modes ---------------------------------------------------------

@dataclass(frozen=True)
class Protected:
    enclave: int | None = None   # None is the OS context

    def __str__(self) -> str:
        return "Protected(Os)" if self.enclave is None else f"Protected(Enclave({self.enclave}))"


@dataclass(frozen=True)
class Smm:
    def __str__(self) -> str:
        return "Smm"


SMM = Smm()


def permitted(actor: Actor, domain: MemoryDomain, mode) -> bool:
    """The isolation rule table."""
    in_smm = isinstance(mode, Smm)
    if actor.kind == "ssv":
        return in_smm and domain.kind is not DomainKind.EPC
    if in_smm:
        # everything but the supervisor is paused while in SMM
        return False
    if actor.kind in ("os", "adversary"):
        return domain.kind in (DomainKind.SHARED, DomainKind.UNTRUSTED)
    if actor.kind == "enclave":
        if mode.enclave != actor.enclave:
            return False
        if domain.kind is DomainKind.EPC:
            return domain.enclave == actor.enclave
        return domain.kind in (DomainKind.SHARED, DomainKind.UNTRUSTED)
    return False


# -- interrupts --------------------------------------------------------------

@dataclass(frozen=True)
class Target:
    kind: str                 # "Ssv", "Os", "EnclaveNotify"
    enclave: int | None = None

    def __str__(self) -> str:
        return self.kind if self.enclave is None else f"EnclaveNotify({self.enclave})"


TO_SSV = Target("Ssv")
TO_OS = Target("Os")


def notify_target(eid: int) -> Target:
    return Target("EnclaveNotify", eid)


class RedirectionTable:
    """Interrupt vector to delivery target.  Registered vectors default to the OS."""

    def __init__(self):
        self.entries: dict[int, Target] = {}

    def register(self, vector: int) -> None:
        self.entries.setdefault(vector, TO_OS)

    def route(self, vector: int, target: Target) -> None:
        self.entries[vector] = target

    def remove(self, vector: int) -> None:
        self.entries.pop(vector, None)

    def get(self, vector: int) -> Target | None:
        return self.entries.get(vector)

    def __contains__(self, vector: int) -> bool:
        return vector in self.entries


@dataclass(frozen=True)
class SmiSource:
    kind: str                 # "software", "irq", "mailbox"
    vector: int | None = None
    cause: str | None = None


SOFTWARE_SMI = SmiSource("software")
MAILBOX_SMI = SmiSource("mailbox")


@dataclass(frozen=True)
class Interrupt:
    at: int
    vector: int
    cause: str | None = None


# -- request tracing -----------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    step: int
    label: str
    start: int
    duration: int


class Tracer:
    """Collects per-request workflow step records keyed by (session id, seq)."""

    def __init__(self):
        self.records: dict[tuple, list[TraceRecord]] = {}

    def record(self, key, step: int, label: str, start: int, duration: int) -> None:
        self.records.setdefault(key, []).append(TraceRecord(step, label, start, duration))

    def trace(self, key) -> list[TraceRecord]:
        return sorted(self.records.get(key, []), key=lambda r: (r.start, r.step))

    def steps(self, key) -> list[int]:
        return [r.step for r in self.trace(key)]

    def clear(self) -> None:
        self.records.clear()


@dataclass
class PlatformConfig:
    smram_size: int = 256 * KIB
    shared_size: int = 1 * MIB
    untrusted_size: int = 1 * MIB
    epc_size: int = 64 * KIB

    @classmethod
    def from_dict(cls, data: dict | None) -> "PlatformConfig":
        cfg = cls()
        for key, value in (data or {}).items():
            if hasattr(cfg, key):
                setattr(cfg, key, int(value))
        return cfg


class Platform:
    SMRAM_BASE = 0xA0000
    SHARED_BASE = 0x1000_0000
    UNTRUSTED_BASE = 0x2000_0000
    EPC_BASE = 0x8000_0000

    def __init__(self, config: PlatformConfig | None = None, costs: CostTable | None = None,
                 seed: int = 0):
        self.config = config or PlatformConfig()
        self.costs = costs or CostTable()
        self.rng = random.Random(seed)
        self.now = 0
        self.mode = Protected()
        self.saved_context: tuple | None = None
        self.regs = bytearray(self.rng.randbytes(64))
        self.smram = MemoryDomain(DomainKind.SMRAM, self.SMRAM_BASE, self.config.smram_size)
        self.shared = MemoryDomain(DomainKind.SHARED, self.SHARED_BASE, self.config.shared_size)
        self.untrusted = MemoryDomain(DomainKind.UNTRUSTED, self.UNTRUSTED_BASE,
                                      self.config.untrusted_size)
        self.epc: dict[int, MemoryDomain] = {}
        self.redirection = RedirectionTable()
        self.os_queue: deque[Interrupt] = deque()
        self.notify_queues: dict[int, deque] = {}
        self.pending: deque[tuple[int, str | None]] = deque()
        self.pending_source: SmiSource | None = None
        self.smi_handler: Callable[[SmiSource], None] | None = None
        self.smi_entered_at = 0
        self.smi_count = 0
        self.delivery_log: list[tuple] = []
        self.event_log: list[tuple] = []
        self.faults: list[Fault] = []
        self.tracer = Tracer()
        self.cost_ledger: list[tuple[str, int]] | None = None
        self.write_observers: list[Callable] = []
        self._listeners: list[Callable] = []
        self._deferred: list[tuple[str, dict]] = []
        self._draining = False

    # -- time --------------------------------------------------------------

    def advance(self, ns: int, label: str = "") -> None:
        if ns:
            self.now += ns
        if self.cost_ledger is not None and label:
            self.cost_ledger.append((label, ns))

    def charge(self, label: str) -> int:
        """Advance by the named cost-table entry and return the amount."""
        ns = getattr(self.costs, label)
        self.advance(ns, label)
        return ns

    # -- logging & events ----------------------------------------------------

    def log(self, kind: str, /, **fields) -> None:
        self.event_log.append((self.now, kind, tuple(sorted(fields.items()))))

    def subscribe(self, listener: Callable[[str, dict], None]) -> None:
        self._listeners.append(listener)

    def unsubscribe(self, listener) -> None:
        if listener in self._listeners:
            self._listeners.remove(listener)

    def emit(self, event: str, **info) -> None:
        """Notify listeners; events raised in SMM are held until RSM."""
        if not self._listeners:
            return
        if self.in_smm:
            self._deferred.append((event, info))
            return
        for listener in list(self._listeners):
            listener(event, info)

    # -- domains -----------------------------------------------------------------

    @property
    def in_smm(self) -> bool:
        return isinstance(self.mode, Smm)

    def create_epc(self, eid: int) -> MemoryDomain:
        if eid not in self.epc:
            base = self.EPC_BASE + eid * self.config.epc_size
            self.epc[eid] = MemoryDomain(DomainKind.EPC, base, self.config.epc_size, enclave=eid)
        return self.epc[eid]

    def domains(self) -> list[MemoryDomain]:
        return [self.smram, self.shared, self.untrusted, *self.epc.values()]

    def access(self, actor: Actor, domain: MemoryDomain, offset: int, op: Op,
               data: bytes = b"", size: int = 0, tag: str = ""):
        """Perform a checked read or write; returns bytes or a Fault value."""
        length = len(data) if op is Op.WRITE else size
        if offset < 0 or length < 0 or offset + length > domain.size:
            return self._fault(FaultKind.OUT_OF_BOUNDS, actor,
                               f"{domain.name}[{offset}:{offset + length}]")
        if not permitted(actor, domain, self.mode):
            return self._fault(FaultKind.ACCESS_VIOLATION, actor,
                               f"{actor} {op.value} {domain.name} in {self.mode}")
        if op is Op.READ:
            return bytes(domain.contents[offset:offset + length])
        domain.contents[offset:offset + length] = data
        if self.write_observers:
            for observer in self.write_observers:
                observer(actor, domain, offset, bytes(data), tag)
        return b""

    def read(self, actor: Actor, domain: MemoryDomain, offset: int, size: int) -> bytes:
        result = self.access(actor, domain, offset, Op.READ, size=size)
        if isinstance(result, Fault):
            raise PlatformFault(result)
        return result

    def write(self, actor: Actor, domain: MemoryDomain, offset: int, data: bytes,
              tag: str = "") -> None:
        result = self.access(actor, domain, offset, Op.WRITE, data=data, tag=tag)
        if isinstance(result, Fault):
            raise PlatformFault(result)

    def _fault(self, kind: FaultKind, actor, detail: str = "") -> Fault:
        fault = Fault(kind, actor, detail)
        self.faults.append(fault)
        # same record log() would write, without the sort; this path is hot under fuzzing
        self.event_log.append((self.now, "fault", (("actor", str(actor)), ("fault", kind.value))))
        return fault

    # -- enclave entry/exit --------------------------------------------------

    def enter_enclave(self, eid: int) -> None:
        if self.in_smm:
            raise PlatformFault(Fault(FaultKind.ACCESS_VIOLATION, enclave_actor(eid),
                                      "EENTER while in SMM"))
        self.mode = Protected(eid)

    def exit_enclave(self) -> None:
        if not self.in_smm:
            self.mode = Protected()

    # -- SMM -----------------------------------------------------------------

    def context_checksum(self) -> bytes:
        """64-byte digest over the visible CPU state."""
        return hashlib.sha512(str(self.mode).encode() + bytes(self.regs)).digest()

    def trigger_smi(self, source: SmiSource = SOFTWARE_SMI):
        if self.in_smm:
            return self._fault(FaultKind.REENTRANCY, None, "SMI while in SMM")
        self.saved_context = (self.mode, bytes(self.regs))
        self.mode = SMM
        self.smi_count += 1
        self.pending_source = source
        self.smi_entered_at = self.now
        self.log("smi", source=source.kind, vector=source.vector)
        self.charge("smm_switch")
        if self.smi_handler is not None:
            self.smi_handler(source)
            if self.in_smm:
                self.rsm()
        return None

    def rsm(self):
        if not self.in_smm:
            return self._fault(FaultKind.NOT_IN_SMM, None, "RSM outside SMM")
        mode, regs = self.saved_context
        self.mode = mode
        self.regs[:] = regs
        self.saved_context = None
        self.pending_source = None
        self.log("rsm")
        self.charge("smm_return")
        deferred, self._deferred = self._deferred, []
        for event, info in deferred:
            self.emit(event, **info)
        self.deliver_pending()
        return None

    def scribble_registers(self) -> None:
        """Model the handler clobbering general registers while in SMM."""
        self.regs[:] = self.rng.randbytes(64)

    # -- interrupts ---------------------------------------------------------------

    def raise_interrupt(self, vector: int, cause: str | None = None):
        target = self.redirection.get(vector)
        if target is None:
            return self._fault(FaultKind.UNKNOWN_VECTOR, None, f"vector {vector:#x}")
        if target is TO_SSV or target == TO_SSV:
            if self.in_smm or self._draining:
                self.pending.append((vector, cause))
                return None
            self.delivery_log.append((self.now, vector, "Ssv"))
            return self.trigger_smi(SmiSource("irq", vector, cause))
        self._deliver(vector, target, cause)
        return None

    def deliver_to_os(self, vector: int, cause: str | None = None) -> None:
        """Inter-processor forwarding of an interrupt to the OS."""
        self._deliver(vector, TO_OS, cause)

    def notify_enclave(self, eid: int, vector: int | None = None) -> None:
        self._deliver(vector if vector is not None else -1, notify_target(eid), "notify")

    def _deliver(self, vector: int, target: Target, cause) -> None:
        self.delivery_log.append((self.now, vector, str(target)))
        if target.kind == "Os":
            self.os_queue.append(Interrupt(self.now, vector, cause))
        else:
            self.notify_queues.setdefault(target.enclave, deque()).append(
                Interrupt(self.now, vector, cause))

    def deliver_pending(self) -> None:
        if self._draining or self.in_smm:
            return
        self._draining = True
        try:
            while self.pending and not self.in_smm:
                vector, cause = self.pending.popleft()
                self.delivery_log.append((self.now, vector, "Ssv"))
                self.trigger_smi(SmiSource("irq", vector, cause))
        finally:
            self._draining = False

    def ack_pending(self, vector: int, cause: str) -> int:
        """Drop latched interrupts of one cause (driver-side completion ack)."""
        kept = deque(p for p in self.pending if p != (vector, cause))
        dropped = len(self.pending) - len(kept)
        self.pending = kept
        return dropped
