"""Assembly of one simulated machine: platform, devices, host, SSV and CA."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .channel.ca import CertificateAuthority
from .channel.session import DEFAULT_TIMEOUT_NS, Session, establish
from .costs import CostTable
from .devices.clocks import ClockBank, ClockConfig
from .devices.nic import Fabric, Nic
from .enclave import Enclave
from .host import Host
from .platform import Platform, PlatformConfig
from .ssv.supervisor import DEFAULT_IMAGE, SmmSupervisor

DEFAULT_MAC = bytes.fromhex("525400a0b0c0")


@dataclass
class MachineConfig:
    platform: PlatformConfig = field(default_factory=PlatformConfig)
    clocks: ClockConfig = field(default_factory=ClockConfig)
    costs: CostTable = field(default_factory=CostTable)
    mac: bytes = DEFAULT_MAC
    nic_vector: int = 0x2B
    ring_len: int = 16
    promiscuous: bool = False
    uio: bool = True
    fifo_capacity: int = 32
    timeout_ns: int = DEFAULT_TIMEOUT_NS


class Machine:
    def __init__(self, config: MachineConfig | None = None, *, seed: int = 0,
                 fabric: Fabric | None = None):
        self.config = config or MachineConfig()
        self.seed = seed
        rng = random.Random(f"machine:{seed}")
        self.platform = Platform(self.config.platform, self.config.costs, seed)
        self.clocks = ClockBank(self.platform, self.config.clocks)
        self.fabric = fabric if fabric is not None else Fabric()
        self.nic = Nic(self.platform, self.config.mac, vector=self.config.nic_vector,
                       ring_len=self.config.ring_len, promiscuous=self.config.promiscuous)
        self.fabric.attach(self.nic)
        self.host = Host(self.platform, self.nic, uio=self.config.uio)
        # hardware and firmware secrets, known to the CA but never to the OS
        self._attestation_key = rng.randbytes(32)
        bios_key = rng.randbytes(32)
        self.ssv = SmmSupervisor(self.platform, self.clocks, self.nic, image=DEFAULT_IMAGE,
                                 bios_key=bios_key)
        self.ca = CertificateAuthority(self._attestation_key, bios_key, self.ssv.image_hash)
        self.ca.attach_ssv(self.ssv)
        self.host.ssv_identity = self.ssv.identity_token
        self.enclaves: dict[int, Enclave] = {}
        self.sessions: list[Session] = []

    def create_enclave(self, eid: int | None = None, *, register: bool = True,
                       epid: bytes | None = None, code: bytes = b"aurora-enclave") -> Enclave:
        eid = len(self.enclaves) + 1 if eid is None else eid
        enclave = Enclave(self.platform, eid, epid=epid, code=code, seed=self.seed)
        enclave._attestation_key = self._attestation_key
        if register:
            self.ca.register_enclave(enclave.epid, enclave.measurement)
        self.enclaves[eid] = enclave
        return enclave

    def open_session(self, enclave: Enclave, **kw) -> Session:
        kw.setdefault("capacity", self.config.fifo_capacity)
        kw.setdefault("timeout_ns", self.config.timeout_ns)
        session = establish(enclave, self.host, self.ca, **kw)
        self.sessions.append(session)
        return session

    def step(self, idle: bool = True) -> None:
        """Let the OS run its interrupt handlers, then idle for one quantum."""
        self.platform.exit_enclave()
        self.host.service_interrupts()
        if idle:
            self.platform.charge("idle_step")
