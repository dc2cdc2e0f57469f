"""Enclave side of the secure session.

Requests carry a per-session counter that the SSV echoes in the matching
response, so the enclave always knows exactly which response it expects
next.  Unsolicited device events (received frames) use a separate counter.
A response that does not match, fails authentication or never arrives is
reported to the caller; nothing unauthenticated is ever returned as data.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from ..costs import MS
from ..enclave import Enclave
from ..errors import (AuthFail, BoundaryViolation, ChannelError, Closed, DriverError, FifoFull,
                      FrameTooLarge, OperationUnsupported, OutOfMemory, ReplayOrReorder,
                      RequestFailed, RingFull, TagCollision, Timeout, UnknownDevice)
from ..host import Host
from . import frames
from .ca import CertificateAuthority
from .fifo import Fifo
from .frames import Device, Direction, Operation, PlainFrame, Status
from .protocol import CMD_TEARDOWN

DEFAULT_TIMEOUT_NS = 10 * MS

_STATUS_ERRORS = {
    Status.UNKNOWN_DEVICE: UnknownDevice,
    Status.OPERATION_UNSUPPORTED: OperationUnsupported,
    Status.DRIVER_ERROR: DriverError,
    Status.BOUNDARY_VIOLATION: BoundaryViolation,
    Status.OUT_OF_MEMORY: OutOfMemory,
    Status.TAG_COLLISION: TagCollision,
    Status.FRAME_TOO_LARGE: FrameTooLarge,
    Status.RING_FULL: RingFull,
}


class Immediate:
    def __repr__(self) -> str:
        return "Immediate"


IMMEDIATE = Immediate()


@dataclass(frozen=True)
class Batched:
    n: int


class SessionState(enum.Enum):
    ESTABLISHING = "Establishing"
    ACTIVE = "Active"
    CLOSED = "Closed"


@dataclass
class Pending:
    seq: int
    device: int
    operation: int
    done: bool = False
    payload: bytes = b""
    error: Exception | None = None

    def result(self) -> bytes:
        if not self.done:
            raise RuntimeError(f"request {self.seq} not serviced yet")
        if self.error is not None:
            raise self.error
        return self.payload


@dataclass
class SessionMetrics:
    requests: int = 0
    responses: int = 0
    smis: int = 0
    events: int = 0
    timeouts: int = 0
    auth_failures: int = 0
    replays: int = 0
    stale_discarded: int = 0
    polls: int = 0
    frames_sealed: int = 0
    frames_opened: int = 0
    enqueue_failures: int = 0
    discarded: int = 0
    errors: list = field(default_factory=list)


class Session:
    def __init__(self, enclave: Enclave, host: Host, ca: CertificateAuthority, *,
                 capacity: int = 32, timeout_ns: int = DEFAULT_TIMEOUT_NS):
        self.enclave = enclave
        self.platform = enclave.platform
        self.host = host
        self.ca = ca
        self.capacity = capacity
        self.timeout_ns = timeout_ns
        self.state = SessionState.ESTABLISHING
        self.session_id = 0
        self.epid = enclave.epid
        self.key_slot: int | None = None
        self.fifo_to_ssv: Fifo | None = None
        self.fifo_from_ssv: Fifo | None = None
        self.tx_seq = 0
        self.evt_seq = 0
        self.outstanding: deque[int] = deque()
        self.abandoned: set[int] = set()
        self.inbox: deque[PlainFrame] = deque()
        self.metrics = SessionMetrics()
        self._pending: list[Pending] = []
        self.on_event = None          # optional callback(PlainFrame)

    # -- establishment ------------------------------------------------------------

    def _establish(self, replaces: int | None = None) -> None:
        enclave, host = self.enclave, self.host
        with enclave.running():
            nonce = enclave.random_bytes(16)
            quote = enclave.quote(nonce)
        token = host.ssv_token()
        if self.fifo_to_ssv is None:
            size = Fifo.footprint(self.capacity)
            to_base = host.alloc_shared(size)
            try:
                from_base = host.alloc_shared(size)
            except ChannelError:
                host.free_shared(to_base, size)
                raise
        else:
            to_base, from_base = self.fifo_to_ssv.base, self.fifo_from_ssv.base
        with enclave.running():
            key = enclave.random_bytes(frames.KEY_SIZE)
        try:
            grant = self.ca.broker(quote, nonce, token, key, to_base, from_base, self.capacity,
                                   replaces=replaces)
        except Exception:
            if self.fifo_to_ssv is None:
                size = Fifo.footprint(self.capacity)
                host.free_shared(to_base, size)
                host.free_shared(from_base, size)
            raise
        self.key_slot = enclave.store_key(key)
        del key
        self.session_id = grant.session_id
        self.fifo_to_ssv = Fifo(self.platform, to_base, self.capacity, "to_ssv")
        self.fifo_from_ssv = Fifo(self.platform, from_base, self.capacity, "from_ssv")
        self.state = SessionState.ACTIVE

    @property
    def key(self) -> bytes:
        """The session key; readable only from inside the enclave."""
        return self.enclave.load_key(self.key_slot)

    @property
    def rx_seq(self) -> int:
        """Sequence number of the next response this end will accept."""
        return self.outstanding[0] if self.outstanding else self.tx_seq

    def _check_active(self) -> None:
        if self.state is not SessionState.ACTIVE:
            raise Closed(f"session {self.session_id} is {self.state.value}")

    # -- frames -----------------------------------------------------------------

    def seal(self, plain: PlainFrame) -> bytes:
        self._check_active()
        self.metrics.frames_sealed += 1
        return frames.seal(self.key, Direction.TO_SSV, plain)

    def _authenticate(self, frame: bytes) -> tuple[int, PlainFrame]:
        try:
            direction, plain = frames.open_sealed(self.key, frame)
        except AuthFail:
            self.metrics.auth_failures += 1
            raise
        if direction not in (Direction.FROM_SSV, Direction.EVENT) \
                or plain.session_id != self.session_id:
            self.metrics.auth_failures += 1
            raise AuthFail("frame not addressed to this end of the session")
        self.metrics.frames_opened += 1
        return direction, plain

    def open(self, frame: bytes) -> PlainFrame:
        """Authenticate and sequence-check one frame from the SSV."""
        self._check_active()
        direction, plain = self._authenticate(frame)
        if direction == Direction.EVENT:
            if plain.seq != self.evt_seq:
                self.metrics.replays += 1
                raise ReplayOrReorder(f"event seq {plain.seq}, expected {self.evt_seq}")
            self.evt_seq += 1
            return plain
        if plain.seq != self.rx_seq or not self.outstanding:
            self.metrics.replays += 1
            raise ReplayOrReorder(f"response seq {plain.seq}, expected {self.rx_seq}")
        self.outstanding.popleft()
        return plain

    # -- requests ------------------------------------------------------------------

    def request(self, device: int, operation: int, payload: bytes = b"", mode=IMMEDIATE):
        """Issue one SMM call.  Immediate returns the payload; Batched returns a Pending."""
        self._check_active()
        platform, actor = self.platform, self.enclave.actor
        seq = self.tx_seq
        plain = PlainFrame(self.session_id, seq, int(device), int(operation), 0, payload)
        key = (self.session_id, seq)
        with self.enclave.running():
            t = platform.now
            sealed = self.seal(plain)
            platform.charge("epc_encrypt")
            platform.tracer.record(key, 1, "EPC encryption", t, platform.now - t)
            # the counter is spent even if the copy fails, so nonces never repeat
            self.tx_seq += 1
            t = platform.now
            try:
                self.fifo_to_ssv.enqueue(actor, sealed)
            except FifoFull:
                self.metrics.enqueue_failures += 1
                raise
            platform.charge("copy_to_shared")
            platform.tracer.record(key, 2, "Copy to shared RAM", t, platform.now - t)
        self.metrics.requests += 1
        pending = Pending(seq, int(device), int(operation))
        self._pending.append(pending)
        self.outstanding.append(seq)
        threshold = 1 if isinstance(mode, Immediate) else max(1, mode.n)
        if len(self._pending) >= threshold:
            self.flush()
        if isinstance(mode, Immediate):
            return pending.result()
        return pending

    def flush(self) -> list[Pending]:
        """Issue one SMI for everything queued and collect the responses."""
        batch, self._pending = self._pending, []
        if not batch:
            return batch
        deadline = self.platform.now + self.timeout_ns
        if self.host.smi_call(self.session_id):
            self.metrics.smis += 1
        self._collect(batch, deadline)
        return batch

    def _fail(self, waiting: dict[int, Pending], error: Exception, *, all_: bool = False):
        victims = list(waiting.values()) if all_ else [waiting[min(waiting)]]
        for p in victims:
            p.done, p.error = True, error
            del waiting[p.seq]
            self.abandoned.add(p.seq)
            if p.seq in self.outstanding:
                self.outstanding.remove(p.seq)
        self.metrics.errors.append(error.kind)

    def _collect(self, batch: list[Pending], deadline: int) -> None:
        platform, actor = self.platform, self.enclave.actor
        waiting = {p.seq: p for p in batch}
        with self.enclave.running():
            while waiting and platform.now <= deadline:
                frame = self.fifo_from_ssv.dequeue(actor)
                if frame is None:
                    break
                t10 = platform.now
                platform.charge("copy_to_epc")
                t11 = platform.now
                platform.charge("epc_decrypt")
                try:
                    direction, plain = self._authenticate(frame)
                except AuthFail as exc:
                    self._fail(waiting, exc)
                    continue
                if direction == Direction.EVENT:
                    self._take_event(plain)
                    continue
                if plain.seq in self.abandoned:
                    self.abandoned.discard(plain.seq)
                    self.metrics.stale_discarded += 1
                    continue
                if plain.seq != self.rx_seq or plain.seq not in waiting:
                    self.metrics.replays += 1
                    self._fail(waiting, ReplayOrReorder(
                        f"response seq {plain.seq}, expected {self.rx_seq}"), all_=True)
                    continue
                self.outstanding.popleft()
                key = (self.session_id, plain.seq)
                platform.tracer.record(key, 10, "Copy to EPC", t10, t11 - t10)
                platform.tracer.record(key, 11, "EPC decryption", t11, platform.now - t11)
                pending = waiting.pop(plain.seq)
                pending.done = True
                self.metrics.responses += 1
                if plain.status != Status.OK:
                    cls = _STATUS_ERRORS.get(plain.status)
                    message = plain.payload.decode(errors="replace")
                    pending.error = cls(message) if cls else RequestFailed(plain.status, message)
                else:
                    pending.payload = plain.payload
        if waiting:
            if platform.now < deadline:
                platform.advance(deadline - platform.now, "timeout_wait")
            self.metrics.timeouts += len(waiting)
            self._fail(waiting, Timeout(f"no response within {self.timeout_ns} ns"), all_=True)

    # -- events -------------------------------------------------------------------

    def _take_event(self, plain: PlainFrame) -> None:
        if plain.seq != self.evt_seq:
            self.metrics.replays += 1
            self.metrics.errors.append("ReplayOrReorder")
            return
        self.evt_seq += 1
        self.metrics.events += 1
        self.inbox.append(plain)
        if self.on_event is not None:
            self.on_event(plain)

    def poll(self) -> list[PlainFrame]:
        """Drain the inbound FIFO without an SMI; returns queued events."""
        self._check_active()
        self.metrics.polls += 1
        platform, actor = self.platform, self.enclave.actor
        with self.enclave.running():
            while (frame := self.fifo_from_ssv.dequeue(actor)) is not None:
                platform.charge("copy_to_epc")
                platform.charge("epc_decrypt")
                try:
                    direction, plain = self._authenticate(frame)
                except AuthFail:
                    self.metrics.errors.append("AuthFail")
                    continue
                if direction == Direction.EVENT:
                    self._take_event(plain)
                elif plain.seq in self.abandoned:
                    self.abandoned.discard(plain.seq)
                    self.metrics.stale_discarded += 1
                else:
                    self.metrics.replays += 1
                    self.metrics.errors.append("ReplayOrReorder")
        events = list(self.inbox)
        self.inbox.clear()
        return events

    # -- lifecycle ------------------------------------------------------------------

    def reset(self) -> "Session":
        """Re-run key agreement: fresh key, zeroed counters, same FIFOs."""
        self._check_active()
        old_id, old_slot = self.session_id, self.key_slot
        self._discard_in_flight()
        self.enclave.zeroize_key(old_slot)
        self.tx_seq = self.evt_seq = 0
        self.outstanding.clear()
        self.abandoned.clear()
        self.inbox.clear()
        self._pending = []
        self.state = SessionState.ESTABLISHING
        self._establish(replaces=old_id)
        return self

    def in_flight(self) -> int:
        actor = self.enclave.actor
        with self.enclave.running():
            return self.fifo_to_ssv.pending(actor) + self.fifo_from_ssv.pending(actor)

    def _discard_in_flight(self) -> None:
        self.metrics.discarded += self.in_flight()
        with self.enclave.running():
            self.fifo_to_ssv.clear(self.enclave.actor)
            self.fifo_from_ssv.clear(self.enclave.actor)

    def teardown(self) -> None:
        if self.state is SessionState.CLOSED:
            return
        try:
            self.request(Device.CONTROL, Operation.WRITE, CMD_TEARDOWN)
        except ChannelError as exc:
            self.metrics.errors.append(exc.kind)
        self._discard_in_flight()
        self.enclave.zeroize_key(self.key_slot)
        self.key_slot = None
        size = Fifo.footprint(self.capacity)
        self.host.free_shared(self.fifo_to_ssv.base, size)
        self.host.free_shared(self.fifo_from_ssv.base, size)
        self.state = SessionState.CLOSED


def establish(enclave: Enclave, host: Host, ca: CertificateAuthority, *, capacity: int = 32,
              timeout_ns: int = DEFAULT_TIMEOUT_NS) -> Session:
    """Authenticate both ends through the CA and bring up a session."""
    session = Session(enclave, host, ca, capacity=capacity, timeout_ns=timeout_ns)
    session._establish()
    with enclave.running():
        session.fifo_to_ssv.clear(enclave.actor)
        session.fifo_from_ssv.clear(enclave.actor)
    return session
