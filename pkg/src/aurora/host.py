"""The untrusted host: kernel module, auxiliary library and the OS NIC path.

Everything here runs with OS privileges and is therefore under adversary
control.  Enclaves rely on it only for availability (allocating shared
memory, issuing the SMI on their behalf, relaying notifications); any
misbehaviour surfaces as a detected error or a denial of service.
"""

from __future__ import annotations

import math

from .errors import SharedMemUnavailable
from .platform import OS, PAGE, SOFTWARE_SMI, Platform, notify_target


class Host:
    NOTIFY_VECTOR_BASE = 0x60

    def __init__(self, platform: Platform, nic=None, *, uio: bool = True):
        self.platform = platform
        self.nic = nic
        self.uio = uio
        self._pages = [False] * (platform.shared.size // PAGE)
        self.delays: dict = {}                 # session id or "all" -> ns (inf = never)
        self.ssv_identity = None               # callable returning the SSV token
        self.os_rx: list[bytes] = []
        self.os_interrupts: list = []
        self.smi_calls = 0
        self._next_vector = self.NOTIFY_VECTOR_BASE

    # -- shared memory (kernel module) -------------------------------------------

    def alloc_shared(self, size: int) -> int:
        """Contiguous page-aligned region of SharedRam; returns its offset."""
        need = -(-size // PAGE)
        run = 0
        for i, used in enumerate(self._pages):
            run = 0 if used else run + 1
            if run == need:
                start = i - need + 1
                for j in range(start, i + 1):
                    self._pages[j] = True
                return start * PAGE
        raise SharedMemUnavailable(f"no {need} contiguous free pages in SharedRam")

    def free_shared(self, offset: int, size: int) -> None:
        start = offset // PAGE
        for j in range(start, start + -(-size // PAGE)):
            self._pages[j] = False

    def pages_free(self) -> int:
        return self._pages.count(False)

    # -- SMM calls ------------------------------------------------------------

    def ssv_token(self):
        return self.ssv_identity()

    def delay_for(self, session_id) -> float:
        return self.delays.get(session_id, self.delays.get("all", 0))

    def smi_call(self, session_id=None) -> bool:
        """Issue a software SMI for an enclave; False when the host withholds it."""
        platform = self.platform
        platform.exit_enclave()
        platform.emit("pre_smi", session=session_id)
        delay = self.delay_for(session_id)
        if math.isinf(delay):
            platform.log("smi_withheld", session=session_id)
            return False
        if delay:
            platform.advance(int(delay), "host_delay")
        self.smi_calls += 1
        platform.trigger_smi(SOFTWARE_SMI)
        platform.emit("post_smi", session=session_id)
        return True

    # -- notification relay (UIO-style) ------------------------------------------

    def create_notify_relay(self, eid: int) -> int | None:
        if not self.uio:
            return None
        vector = self._next_vector
        self._next_vector += 1
        self.platform.redirection.route(vector, notify_target(eid))
        return vector

    def drop_notify_relay(self, vector: int) -> None:
        self.platform.redirection.remove(vector)

    # -- OS network path -----------------------------------------------------------

    def os_send(self, frame: bytes) -> None:
        self.platform.exit_enclave()
        self.nic.nic_tx(frame)

    def service_interrupts(self) -> int:
        """Run the OS interrupt handlers for everything queued so far."""
        platform = self.platform
        handled = 0
        while platform.os_queue:
            irq = platform.os_queue.popleft()
            self.os_interrupts.append(irq)
            handled += 1
            if self.nic is not None and irq.vector == self.nic.vector:
                for index, _frame in self.nic.nic_rx_scan(OS):
                    self.os_rx.append(self.nic.consume(index))
        return handled
