"""The SMM supervisor (SSV).

Entered on every SMI.  Handles, in order: key grants from the CA mailbox,
then either the enclaves' request FIFOs (software SMI) or the interrupting
device (device SMI).  Before returning it scrubs the heap and the secrets
scratch pages, checks that device registers are back to their entry state
and resumes with RSM.

SMRAM layout (offsets)::

    0x00000  key table, 64 slots x 64 bytes (key 32 | epid 16 | reserved)
    0x04000  scratch: sealed-in page, plaintext page, sealed-out page
    0x10000  secure heap arena (64 KiB)
"""

from __future__ import annotations

import hashlib
from collections import Counter, deque
from dataclasses import dataclass

from ..channel import frames
from ..channel.ca import SessionGrant, SsvToken, sign_image
from ..channel.fifo import Fifo
from ..channel.frames import Device, Direction, Operation, PlainFrame, Status
from ..channel.protocol import (CMD_FLOW, CMD_TEARDOWN, CMD_UNFLOW, SERVICE_LABELS,
                                unpack_flow)
from ..devices.clocks import ClockBank
from ..devices.nic import Nic
from ..errors import (AuthFail, BoundaryViolation, DeviceError, DriverError, FifoFull,
                      FrameTooLarge, OperationUnsupported, OutOfMemory, RingFull, SsvError,
                      TagCollision, UnknownDevice)
from ..platform import MAILBOX_SMI, PAGE, SSV, TO_OS, TO_SSV, Platform, SmiSource
from .drivers import ClockDriver, Driver, NicDriver
from .flows import FlowEntry, FlowTable
from .heap import SecureHeap

KEY_TABLE = 0x0000
KEY_SLOT_SIZE = 64
KEY_SLOTS = 64
SCRATCH = 0x4000
SCRATCH_PAGES = 3
HEAP_OFFSET = 0x10000
HEAP_SIZE = 0x10000

DEFAULT_IMAGE = b"aurora-ssv-image-v1"

_STATUS = {
    UnknownDevice: Status.UNKNOWN_DEVICE,
    OperationUnsupported: Status.OPERATION_UNSUPPORTED,
    BoundaryViolation: Status.BOUNDARY_VIOLATION,
    OutOfMemory: Status.OUT_OF_MEMORY,
    TagCollision: Status.TAG_COLLISION,
    FrameTooLarge: Status.FRAME_TOO_LARGE,
    RingFull: Status.RING_FULL,
}


@dataclass(frozen=True)
class TssRequest:
    device: int
    epid: bytes
    operation: int
    payload: bytes


@dataclass
class SsvSession:
    session_id: int
    epid: bytes
    slot: int
    to_ssv: Fifo
    from_ssv: Fifo
    last_req_seq: int = -1
    evt_seq: int = 0


@dataclass
class DriverContext:
    ssv: "SmmSupervisor"
    platform: Platform
    heap: SecureHeap
    session: SsvSession | None
    flow: FlowEntry | None


class SmmSupervisor:
    def __init__(self, platform: Platform, clocks: ClockBank | None = None,
                 nic: Nic | None = None, *, image: bytes = DEFAULT_IMAGE,
                 bios_key: bytes = b""):
        self.platform = platform
        self.clocks = clocks
        self.nic = nic
        self.image_hash = hashlib.sha256(image).digest()
        self._token = SsvToken(self.image_hash, sign_image(bios_key, self.image_hash))
        self.heap = SecureHeap(platform, HEAP_OFFSET, HEAP_SIZE)
        self.sessions: dict[int, SsvSession] = {}
        self.flows = FlowTable()
        self.mailbox: deque[SessionGrant] = deque()
        self.counters: Counter = Counter()
        self.drop_log: list[tuple[int, int | None, str]] = []
        self.hygiene_violations: list[tuple[int, str]] = []
        self.drivers: dict[int, Driver] = {}
        if clocks is not None:
            self.drivers[Device.CLOCK] = ClockDriver(clocks)
        if nic is not None:
            self.drivers[Device.NIC] = NicDriver(nic)
            platform.redirection.register(nic.vector)
        self.enabled = False
        self.post_dispatch_hooks: list = []
        self._serviced: list[tuple] = []
        platform.smi_handler = self.dispatch_smi

    # -- identity & key delivery -----------------------------------------------

    def identity_token(self) -> SsvToken:
        return self._token

    def deliver_grant(self, grant: SessionGrant) -> None:
        """Out-of-band key delivery from the CA, consumed on the next SMI."""
        self.mailbox.append(grant)
        self.platform.trigger_smi(MAILBOX_SMI)

    def _free_slot(self) -> int:
        used = {s.slot for s in self.sessions.values()}
        for slot in range(KEY_SLOTS):
            if slot not in used:
                return slot
        raise OutOfMemory("key table full")

    def _key(self, session: SsvSession) -> bytes:
        return self.platform.read(SSV, self.platform.smram,
                                  KEY_TABLE + session.slot * KEY_SLOT_SIZE, 32)

    def _install(self, grant: SessionGrant) -> None:
        platform = self.platform
        flow = None
        if grant.replaces is not None and grant.replaces in self.sessions:
            old = self._remove_session(grant.replaces, keep_flow=True)
            flow = old
        slot = self._free_slot()
        platform.write(SSV, platform.smram, KEY_TABLE + slot * KEY_SLOT_SIZE,
                       grant.key + grant.epid.ljust(16, b"\x00")[:16] + bytes(16))
        session = SsvSession(grant.session_id, grant.epid, slot,
                             Fifo(platform, grant.to_ssv_base, grant.capacity),
                             Fifo(platform, grant.from_ssv_base, grant.capacity))
        self.sessions[grant.session_id] = session
        if flow is not None:
            entry = self.flows.by_session(grant.replaces)
            if entry is not None:
                self.flows.entries[grant.epid] = FlowEntry(entry.epid, grant.session_id,
                                                           entry.tag, entry.ipv4,
                                                           entry.notify_vector)
        self.enabled = True
        self.counters["sessions_installed"] += 1

    def _remove_session(self, session_id: int, *, keep_flow: bool = False):
        platform = self.platform
        session = self.sessions.pop(session_id)
        platform.write(SSV, platform.smram, KEY_TABLE + session.slot * KEY_SLOT_SIZE,
                       bytes(KEY_SLOT_SIZE))
        if not keep_flow:
            entry = self.flows.by_session(session_id)
            if entry is not None:
                self.flows.unregister(entry.epid)
        if not self.sessions and not keep_flow:
            self._disable()
        return session

    def _disable(self) -> None:
        """No enclave left: give every rerouted vector back to the OS."""
        self.enabled = False
        if self.nic is not None:
            self.platform.redirection.route(self.nic.vector, TO_OS)
        for vector, target in list(self.platform.redirection.entries.items()):
            if target == TO_SSV:
                self.platform.redirection.route(vector, TO_OS)

    # -- dispatch ---------------------------------------------------------------

    def dispatch_smi(self, source: SmiSource) -> None:
        platform = self.platform
        entry_regs = self.nic.snapshot() if self.nic is not None else None
        self._serviced = []
        platform.scribble_registers()
        try:
            while self.mailbox:
                self._install(self.mailbox.popleft())
            if source.kind == "irq":
                self._handle_irq(source)
            elif source.kind == "software":
                self._drain_requests()
        finally:
            self._exit(entry_regs)

    def _exit(self, entry_regs) -> None:
        platform = self.platform
        self.heap.reset()
        platform.write(SSV, platform.smram, SCRATCH, bytes(SCRATCH_PAGES * PAGE))
        self._check_hygiene(entry_regs)
        floor = platform.costs.smm_dwell_floor
        if floor:
            spent = platform.now - platform.smi_entered_at + platform.costs.smm_return
            if spent < floor:
                platform.advance(floor - spent, "smm_dwell")
        switch = platform.costs.smm_switch
        for key in self._serviced:
            platform.tracer.record(key, 3, "Switch to SMM", platform.smi_entered_at, switch)
            platform.tracer.record(key, 9, "Return and enter SGX", platform.now,
                                   platform.costs.smm_return)
        for hook in self.post_dispatch_hooks:
            hook(self)
        platform.rsm()

    def _check_hygiene(self, entry_regs) -> None:
        platform = self.platform
        if self.heap.live:
            self.hygiene_violations.append((platform.now, "heap live list not empty"))
        scratch = platform.read(SSV, platform.smram, SCRATCH, SCRATCH_PAGES * PAGE)
        if any(scratch):
            self.hygiene_violations.append((platform.now, "secrets scratch not zeroed"))
        if entry_regs is not None and self.nic.snapshot() != entry_regs:
            self.hygiene_violations.append((platform.now, "device registers not restored"))
        self.counters["dispatches"] += 1

    def count(self, what: str, n: int = 1) -> None:
        self.counters[what] += n

    def _drop(self, session_id, reason: str) -> None:
        self.counters["frames_dropped"] += 1
        self.counters[f"drop_{reason}"] += 1
        self.drop_log.append((self.platform.now, session_id, reason))
        self.platform.log("ssv_drop", session=session_id, reason=reason)

    # -- software SMI: request servicing --------------------------------------------

    def _drain_requests(self) -> None:
        for sid in sorted(self.sessions):
            session = self.sessions.get(sid)
            while session is not None and sid in self.sessions:
                frame = session.to_ssv.dequeue(SSV)
                if frame is None:
                    break
                self._serve_frame(session, frame)

    def _serve_frame(self, session: SsvSession, frame: bytes) -> None:
        platform = self.platform
        t4 = platform.now
        platform.write(SSV, platform.smram, SCRATCH, frame)
        platform.charge("copy_to_smram")
        t5 = platform.now
        key = self._key(session)
        try:
            direction, plain = frames.open_sealed(key, frame)
        except AuthFail:
            self._drop(session.session_id, "AuthFail")
            return
        platform.charge("smram_decrypt")
        if direction != Direction.TO_SSV or plain.session_id != session.session_id:
            self._drop(session.session_id, "AuthFail")
            return
        if plain.seq <= session.last_req_seq:
            self._drop(session.session_id, "ReplayOrReorder")
            return
        session.last_req_seq = plain.seq
        self.counters["frames_accepted"] += 1
        platform.write(SSV, platform.smram, SCRATCH + PAGE, plain.pack())
        trace_key = (session.session_id, plain.seq)
        platform.tracer.record(trace_key, 4, "Copy to SMRAM", t4, t5 - t4)
        platform.tracer.record(trace_key, 5, "SMRAM decryption", t5, platform.now - t5)

        t6 = platform.now
        request = TssRequest(plain.device, session.epid, plain.operation, plain.payload)
        status, payload, after = Status.OK, b"", None
        try:
            payload, after = self._control(session, request) if plain.device == Device.CONTROL \
                else (self.service_request(request, session), None)
        except (SsvError, DeviceError, TagCollision) as exc:
            status = _STATUS.get(type(exc), Status.DRIVER_ERROR)
            payload = str(exc).encode()[:256]
            self.counters[f"error_{exc.kind}"] += 1
        label = SERVICE_LABELS.get(plain.device, "Device Service")
        platform.tracer.record(trace_key, 6, label, t6, platform.now - t6)

        t7 = platform.now
        response = PlainFrame(session.session_id, plain.seq, plain.device, plain.operation,
                              status, payload)
        sealed = frames.seal(key, Direction.FROM_SSV, response)
        platform.write(SSV, platform.smram, SCRATCH + 2 * PAGE, sealed)
        platform.charge("smram_encrypt")
        self.counters["frames_sealed"] += 1
        platform.tracer.record(trace_key, 7, "SMRAM encryption", t7, platform.now - t7)
        t8 = platform.now
        try:
            session.from_ssv.enqueue(SSV, sealed)
        except FifoFull:
            self._drop(session.session_id, "FifoFull")
        platform.charge("copy_to_shared_smm")
        platform.tracer.record(trace_key, 8, "Copy to shared RAM", t8, platform.now - t8)
        self._serviced.append(trace_key)
        if after is not None:
            after()

    def service_request(self, req: TssRequest, session: SsvSession | None = None) -> bytes:
        """Run one driver entry point under the save/restore guideline."""
        if req.operation not in (Operation.PROBE, Operation.READ, Operation.WRITE):
            raise OperationUnsupported(f"operation code {req.operation}")
        driver = self.drivers.get(req.device)
        if driver is None:
            raise UnknownDevice(f"device {req.device}")
        ctx = DriverContext(self, self.platform, self.heap, session,
                            self.flows.entries.get(req.epid))
        if req.operation == Operation.PROBE:
            return driver.probe(ctx, req.payload)
        if req.operation == Operation.READ:
            return driver.read(ctx, req.payload)
        device = self.nic if req.device == Device.NIC else None
        saved = device.snapshot() if device is not None else None
        try:
            return driver.write(ctx, req.payload)
        finally:
            if device is not None:
                device.restore(saved)

    def _control(self, session: SsvSession, req: TssRequest):
        """In-band session control: flow registration and teardown."""
        if req.operation == Operation.PROBE:
            return bytes([1, len(self.drivers)]) + bytes(sorted(self.drivers)), None
        if req.operation != Operation.WRITE:
            raise OperationUnsupported("control device accepts probe and write only")
        cmd = req.payload[:4]
        if cmd == CMD_FLOW:
            tag, ipv4, vector = unpack_flow(req.payload)
            self.flows.register(FlowEntry(session.epid, session.session_id, tag, ipv4, vector))
            if self.nic is not None:
                self.platform.redirection.route(self.nic.vector, TO_SSV)
            return b"", None
        if cmd == CMD_UNFLOW:
            self.flows.unregister(session.epid)
            return b"", None
        if cmd == CMD_TEARDOWN:
            sid = session.session_id
            return b"", lambda: self._remove_session(sid)
        raise OperationUnsupported(f"control command {cmd!r}")

    # -- device SMI: interrupt classification ----------------------------------------

    def _handle_irq(self, source: SmiSource) -> None:
        if self.nic is not None and source.vector == self.nic.vector:
            if source.cause == "tx":
                # completion of an OS transmission: not ours
                self.platform.deliver_to_os(source.vector, source.cause)
                return
            self.scan_rx()
            if self.nic.nic_rx_scan(SSV):
                self.platform.deliver_to_os(source.vector, source.cause)
            return
        self.platform.deliver_to_os(source.vector, source.cause)

    def scan_rx(self) -> int:
        """Move every tagged RX frame to its enclave; untagged frames stay for the OS."""
        platform, nic = self.platform, self.nic
        platform.charge("nic_rx_scan")
        delivered = 0
        for index, frame in nic.nic_rx_scan(SSV):
            entry = self.flows.classify(frame)
            if entry is None:
                continue
            nic.consume(index)
            session = self.sessions.get(entry.session_id)
            if session is None:
                # no frame was sealed, so this is not a frame drop
                self.count("rx_unknown_session")
                continue
            self._send_event(session, Device.NIC, frame)
            delivered += 1
            if entry.notify_vector is not None:
                platform.raise_interrupt(entry.notify_vector, "rx")
        self.counters["rx_delivered"] += delivered
        return delivered

    def _send_event(self, session: SsvSession, device: int, payload: bytes) -> None:
        platform = self.platform
        plain = PlainFrame(session.session_id, session.evt_seq, device, Operation.READ, 0,
                           payload[:frames.MAX_PAYLOAD])
        platform.write(SSV, platform.smram, SCRATCH + PAGE, plain.pack())
        sealed = frames.seal(self._key(session), Direction.EVENT, plain)
        session.evt_seq += 1
        self.counters["frames_sealed"] += 1
        self.counters["events_sealed"] += 1
        try:
            session.from_ssv.enqueue(SSV, sealed)
        except FifoFull:
            self._drop(session.session_id, "EventOverflow")
