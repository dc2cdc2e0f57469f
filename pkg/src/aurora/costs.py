"""Virtual-time cost table.

Every simulated action advances the global tick counter by a fixed number
of nanoseconds.  The defaults are modeled, not measured: the eleven
request-path entries reproduce the proportions of a published time-service
breakdown (84 us end to end, clock service dominating), and the NIC entries
use the transmit/receive costs reported for the same prototype.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

US = 1_000
MS = 1_000_000
S = 1_000_000_000


@dataclass
class CostTable:
    # request path, one entry per workflow step (ns)
    epc_encrypt: int = 2 * US
    copy_to_shared: int = 2 * US
    smm_switch: int = 13 * US
    copy_to_smram: int = 0
    smram_decrypt: int = 3 * US
    smram_encrypt: int = 3 * US
    copy_to_shared_smm: int = 0
    smm_return: int = 12 * US
    copy_to_epc: int = 3 * US
    epc_decrypt: int = 2 * US

    # clock driver: 14 + 4 * 2.5 + 20 = 44 us per service without RTC collision
    rtc_read: int = 14 * US
    timer_read: int = 2_500
    clock_assemble: int = 20 * US

    # NIC driver
    nic_probe: int = 5 * US
    nic_context: int = 400 * US
    nic_tx: int = 100 * US
    nic_rx_scan: int = 200 * US
    wire_ns_per_byte: int = 8

    # enclave network stack
    stack_per_frame: int = 5 * US
    stack_ns_per_byte: int = 2

    # untrusted host
    os_context_switch: int = 5 * US
    idle_step: int = 10 * US

    # SMM preemption floor; 0 disables (benchmarks emulate fixed dwell times)
    smm_dwell_floor: int = 0

    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict | None) -> "CostTable":
        table = cls()
        for key, value in (data or {}).items():
            if key in {f.name for f in dataclasses.fields(cls)} and key != "extra":
                setattr(table, key, int(value))
            else:
                table.extra[key] = int(value)
        return table

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("extra")
        out.update(self.extra)
        return out

    @classmethod
    def zero(cls) -> "CostTable":
        table = cls()
        for f in dataclasses.fields(cls):
            if f.name != "extra":
                setattr(table, f.name, 0)
        return table
