"""The man-in-the-kernel.

A scriptable actor with full OS privilege.  It reads and writes shared and
untrusted memory, rewrites FIFO slots and indices, issues SMIs, swaps the
SSV identity the host reports, forges enclave quotes, reprograms clock
devices, injects NIC frames and withholds SMIs.  Everything goes through
the interfaces a real kernel has (checked platform accesses, device
registers, the host library); attempts on SMRAM or EPC come back as platform
faults and are recorded like any other observation.

Script format (JSON)::

    {"name": "replay",
     "expected": "DetectedAs(ReplayOrReorder)",
     "steps": [
       {"trigger": {"event": "post_smi", "occurrence": 1}, "action": "capture_frame",
        "params": {"fifo": "from_ssv"}},
       {"trigger": {"event": "post_smi", "occurrence": 2}, "action": "replay_frame",
        "params": {"index": 0}}]}

A trigger is either ``{"at_ns": t}`` (fires once virtual time reaches t) or
``{"event": "pre_smi" | "post_smi", "occurrence": n, "session": i}``.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .channel import frames
from .channel.ca import SsvToken
from .channel.fifo import Fifo
from .channel.frames import FRAME_SIZE, Device, Direction, Operation, PlainFrame
from .devices.clocks import Source
from .enclave import Quote
from .errors import AuthFailEnclave, AuthFailSsv, ConfigInvalid, Fault
from .platform import ADVERSARY, SOFTWARE_SMI, Op
from .ssv.flows import flow_tag


# -- observation trace ----------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    at: int
    domain: str
    offset: int
    data: bytes
    kind: str


class ObservationTrace:
    """Append-only record of everything the adversary saw or did."""

    def __init__(self):
        self._records: list[Observation] = []

    def append(self, record: Observation) -> None:
        self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(tuple(self._records))

    def __getitem__(self, index):
        return self._records[index]

    @property
    def records(self) -> tuple[Observation, ...]:
        return tuple(self._records)

    def of_kind(self, kind: str) -> list[Observation]:
        return [r for r in self._records if r.kind == kind]

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self._records:
            h.update(f"{r.at}|{r.domain}|{r.offset}|{r.kind}|".encode() + r.data)
        return h.hexdigest()


# -- scripts ----------------------------------------------------------------------

_OUTCOME = re.compile(r"^(DetectedAs)\((\w+)\)$|^(DegradedToDoS|NoEffect)$")


@dataclass(frozen=True)
class Outcome:
    kind: str                  # DetectedAs, DegradedToDoS, NoEffect
    error: str | None = None

    def __str__(self) -> str:
        return f"DetectedAs({self.error})" if self.kind == "DetectedAs" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Outcome":
        m = _OUTCOME.match(text.strip())
        if not m:
            raise ConfigInvalid(f"bad expected outcome {text!r}")
        if m.group(1):
            return cls("DetectedAs", m.group(2))
        return cls(m.group(3))


@dataclass
class Trigger:
    at_ns: int | None = None
    event: str | None = None
    occurrence: int = 1
    session: int | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "Trigger":
        unknown = set(data) - {"at_ns", "event", "occurrence", "session"}
        if unknown or ("at_ns" in data) == ("event" in data):
            raise ConfigInvalid(f"bad trigger {data!r}")
        return cls(data.get("at_ns"), data.get("event"), data.get("occurrence", 1),
                   data.get("session"))

    def to_dict(self) -> dict:
        if self.at_ns is not None:
            return {"at_ns": self.at_ns}
        out = {"event": self.event, "occurrence": self.occurrence}
        if self.session is not None:
            out["session"] = self.session
        return out


@dataclass
class AttackStep:
    trigger: Trigger
    action: str
    params: dict = field(default_factory=dict)
    fired: bool = False


@dataclass
class AttackScript:
    name: str
    steps: list[AttackStep]
    expected: Outcome
    description: str = ""
    scenario: str = "attack-base"     # shipped scenario the script runs against

    @classmethod
    def from_dict(cls, data: dict) -> "AttackScript":
        try:
            steps = [AttackStep(Trigger.from_dict(s["trigger"]), s["action"],
                                dict(s.get("params", {}))) for s in data["steps"]]
            script = cls(data["name"], steps, Outcome.parse(data["expected"]),
                         data.get("description", ""), data.get("scenario", "attack-base"))
        except (KeyError, TypeError) as exc:
            raise ConfigInvalid(f"malformed attack script: {exc}") from exc
        for step in script.steps:
            if step.action not in Adversary.ACTIONS:
                raise ConfigInvalid(f"unknown attack action {step.action!r}")
        return script

    @classmethod
    def load(cls, path) -> "AttackScript":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"name": self.name, "description": self.description,
                "expected": str(self.expected), "scenario": self.scenario,
                "steps": [{"trigger": s.trigger.to_dict(), "action": s.action,
                           "params": s.params} for s in self.steps]}


# -- the adversary ------------------------------------------------------------------

class Adversary:
    ACTIONS = ("snoop_shared", "capture_frame", "tamper_frame", "replay_frame", "drop_frame",
               "reorder", "fake_smi", "fake_ssv_handshake", "fake_enclave", "clock_tamper",
               "inject_nic_frame", "delay", "probe_protected")

    def __init__(self, machine):
        self.machine = machine
        self.platform = machine.platform
        self.host = machine.host
        self.actor = ADVERSARY
        self.trace = ObservationTrace()
        self.captured: list[bytes] = []
        self.injected = 0          # channel frames the adversary put into FIFOs
        self.removed = 0           # channel frames it took out of FIFOs
        self.detections: list[str] = []
        self.steps: list[AttackStep] = []
        self.events: Counter = Counter()
        self.actions_done: list[tuple[int, str]] = []
        self._listening = False
        self._watching = False

    # -- scripting ----------------------------------------------------------------

    def arm(self, script: AttackScript) -> None:
        for step in script.steps:
            self.steps.append(AttackStep(step.trigger, step.action, dict(step.params)))
        if not self._listening:
            self.platform.subscribe(self._on_event)
            self._listening = True

    def disarm(self) -> None:
        if self._listening:
            self.platform.unsubscribe(self._on_event)
            self._listening = False

    def _session_index(self, session_id) -> int | None:
        for i, s in enumerate(self.machine.sessions):
            if s.session_id == session_id:
                return i
        return None

    def _on_event(self, event: str, info: dict) -> None:
        index = self._session_index(info.get("session"))
        self.events[(event, None)] += 1
        self.events[(event, index)] += 1
        for step in self.steps:
            trig = step.trigger
            if step.fired or trig.event != event:
                continue
            if trig.session is not None and trig.session != index:
                continue
            if self.events[(event, trig.session)] == trig.occurrence:
                step.fired = True
                self.perform(step.action, **step.params)

    def tick(self) -> None:
        """Fire time-triggered steps that are due."""
        for step in self.steps:
            if not step.fired and step.trigger.at_ns is not None \
                    and self.platform.now >= step.trigger.at_ns:
                step.fired = True
                self.perform(step.action, **step.params)

    def pending_steps(self) -> int:
        return sum(1 for s in self.steps if not s.fired)

    def perform(self, action: str, **params):
        if action not in self.ACTIONS:
            raise ConfigInvalid(f"unknown attack action {action!r}")
        self.platform.exit_enclave()
        self.actions_done.append((self.platform.now, action))
        self._note("action", action.encode())
        return getattr(self, action)(**params)

    # -- helpers --------------------------------------------------------------------

    def _note(self, kind: str, data: bytes = b"", domain: str = "", offset: int = 0) -> None:
        self.trace.append(Observation(self.platform.now, domain, offset, bytes(data), kind))

    def _read(self, domain, offset: int, size: int) -> bytes | None:
        result = self.platform.access(self.actor, domain, offset, Op.READ, size=size)
        if isinstance(result, Fault):
            self._note("fault", str(result.kind.value).encode(), domain.name, offset)
            return None
        self._note("read", result, domain.name, offset)
        return result

    def _write(self, domain, offset: int, data: bytes) -> bool:
        result = self.platform.access(self.actor, domain, offset, Op.WRITE, data=data,
                                      tag="adversary")
        if isinstance(result, Fault):
            self._note("fault", str(result.kind.value).encode(), domain.name, offset)
            return False
        self._note("write", data, domain.name, offset)
        return True

    def _session(self, session: int = 0):
        try:
            return self.machine.sessions[session]
        except IndexError:
            raise ConfigInvalid(f"no session {session}") from None

    def _fifo(self, session: int, which: str) -> Fifo:
        s = self._session(session)
        fifo = s.fifo_to_ssv if which == "to_ssv" else s.fifo_from_ssv
        # the kernel allocated these pages, so it knows where they are
        return Fifo(self.platform, fifo.base, fifo.capacity, which)

    def _indices(self, fifo: Fifo) -> tuple[int, int]:
        prod = int.from_bytes(self._read(fifo.domain, fifo.base, 8), "little")
        cons = int.from_bytes(self._read(fifo.domain, fifo.base + 4096, 8), "little")
        return prod, cons

    def _set_producer(self, fifo: Fifo, value: int) -> None:
        self._write(fifo.domain, fifo.base, value.to_bytes(8, "little") + bytes(4088))

    def _slot(self, fifo: Fifo, index: int) -> bytes:
        return self._read(fifo.domain, fifo.slot_offset(index), FRAME_SIZE)

    # -- memory ---------------------------------------------------------------------

    def watch(self) -> None:
        """Record every write anyone makes to memory the OS can see."""
        if self._watching:
            return
        self._watching = True

        def observer(actor, domain, offset, data, tag):
            if domain.kind.value in ("SharedRam", "UntrustedRam") and actor != self.actor:
                self.trace.append(Observation(self.platform.now, domain.name, offset, data,
                                              "observed_write"))
        self.platform.write_observers.append(observer)

    def snoop_shared(self) -> bytes:
        data = self._read(self.platform.shared, 0, self.platform.shared.size) or b""
        self._read(self.platform.untrusted, 0, self.platform.untrusted.size)
        return data

    def probe_protected(self, domain: str = "smram") -> bool:
        """Try to read SMRAM or an EPC; the platform answers with a fault."""
        platform = self.platform
        if domain == "smram":
            target = platform.smram
        else:
            eid = int(domain.split(":")[1]) if ":" in domain else min(platform.epc)
            target = platform.epc[eid]
        return self._read(target, 0, 64) is not None

    # -- FIFO manipulation -------------------------------------------------------------

    def capture_frame(self, session: int = 0, fifo: str = "from_ssv", position: int = 0):
        f = self._fifo(session, fifo)
        prod, cons = self._indices(f)
        if cons + position >= prod:
            return None
        frame = self._slot(f, cons + position)
        self.captured.append(frame)
        return frame

    def tamper_frame(self, session: int = 0, fifo: str = "to_ssv", position: int = 0,
                     offset: int = 64, xor: int = 0x01) -> bool:
        f = self._fifo(session, fifo)
        prod, cons = self._indices(f)
        if cons + position >= prod:
            return False
        frame = bytearray(self._slot(f, cons + position))
        frame[offset] ^= xor
        return self._write(f.domain, f.slot_offset(cons + position), bytes(frame))

    def replay_frame(self, index: int = 0, session: int = 0, fifo: str = "from_ssv",
                     mode: str = "overwrite") -> bool:
        """Put a captured frame back: over the head slot, or at the tail."""
        if index >= len(self.captured):
            return False
        f = self._fifo(session, fifo)
        prod, cons = self._indices(f)
        frame = self.captured[index]
        if mode == "overwrite" and prod > cons:
            self._write(f.domain, f.slot_offset(cons), frame)
            self.removed += 1
        else:
            self._write(f.domain, f.slot_offset(prod), frame)
            self._set_producer(f, prod + 1)
        self.injected += 1
        return True

    def drop_frame(self, session: int = 0, fifo: str = "to_ssv", position: int = 0) -> bool:
        """Remove one queued frame by shifting the later ones down."""
        f = self._fifo(session, fifo)
        prod, cons = self._indices(f)
        target = cons + position
        if target >= prod:
            return False
        for i in range(target, prod - 1):
            self._write(f.domain, f.slot_offset(i), self._slot(f, i + 1))
        self._set_producer(f, prod - 1)
        self.removed += 1
        return True

    def reorder(self, i: int = 0, j: int = 1, session: int = 0, fifo: str = "from_ssv") -> bool:
        f = self._fifo(session, fifo)
        prod, cons = self._indices(f)
        if cons + max(i, j) >= prod:
            return False
        a, b = self._slot(f, cons + i), self._slot(f, cons + j)
        self._write(f.domain, f.slot_offset(cons + i), b)
        self._write(f.domain, f.slot_offset(cons + j), a)
        return True

    def fake_smi(self, session: int = 0, payload: str | bytes = b"", device: int = Device.NIC,
                 operation: int = Operation.WRITE, seq: int | None = None,
                 victim_tag: int | None = None, key: str | None = None) -> bool:
        """Forge a request under a guessed key, queue it for the SSV and raise an SMI."""
        s = self._session(session)
        if isinstance(payload, str):
            payload = bytes.fromhex(payload)
        if victim_tag is not None:
            payload = tagged_frame(self.machine, self._session(victim_tag))
        guessed = bytes.fromhex(key) if key else self.platform.rng.randbytes(frames.KEY_SIZE)
        plain = PlainFrame(s.session_id, s.tx_seq + 1000 if seq is None else seq, int(device),
                           int(operation), 0, payload)
        forged = frames.seal(guessed, Direction.TO_SSV, plain)
        f = self._fifo(session, "to_ssv")
        prod, cons = self._indices(f)
        if prod - cons >= f.capacity:
            return False
        self._write(f.domain, f.slot_offset(prod), forged)
        self._set_producer(f, prod + 1)
        self.injected += 1
        self.platform.trigger_smi(SOFTWARE_SMI)
        return True

    # -- identities -------------------------------------------------------------------

    def fake_ssv_handshake(self, image: str = "rootkit-ssv") -> None:
        """Make the host report a forged SSV identity from now on."""
        token = SsvToken(hashlib.sha256(image.encode()).digest(),
                         self.platform.rng.randbytes(32))
        self.host.ssv_identity = lambda: token
        self._note("ssv_identity", token.image_hash)

    def fake_enclave(self, epid: str | None = None) -> str | None:
        """Ask the CA for a session with a quote the adversary had to make up."""
        rng = self.platform.rng
        epid_bytes = bytes.fromhex(epid) if epid else rng.randbytes(16)
        nonce = rng.randbytes(16)
        quote = Quote(epid_bytes, hashlib.sha256(b"rootkit").digest(), nonce, rng.randbytes(32))
        base = self.host.alloc_shared(Fifo.footprint(1) * 2)
        try:
            self.machine.ca.broker(quote, nonce, self.host.ssv_token(), rng.randbytes(32), base,
                                   base + Fifo.footprint(1), 1)
        except (AuthFailEnclave, AuthFailSsv) as exc:
            self.detections.append(exc.kind)
            self._note("rejected", exc.kind.encode())
            return exc.kind
        finally:
            self.host.free_shared(base, Fifo.footprint(1) * 2)
        return None

    # -- devices and scheduling --------------------------------------------------------

    def clock_tamper(self, source: str = "Rtc", op: str = "set_back", amount=0,
                     seconds: float | None = None) -> None:
        self.machine.clocks.tamper(Source.parse(source), op, amount, seconds=seconds)
        self._note("clock_tamper", f"{source}:{op}".encode())

    def inject_nic_frame(self, frame: str | bytes | None = None, tagged_for: int | None = None,
                         count: int = 1) -> int:
        if frame is None:
            frame = (tagged_frame(self.machine, self._session(tagged_for))
                     if tagged_for is not None else untagged_frame(self.machine))
        elif isinstance(frame, str):
            frame = bytes.fromhex(frame)
        for _ in range(count):
            self.machine.nic.tamper("inject_rx", frame=frame)
        self._note("inject", frame)
        return count

    def delay(self, session: int | str = "all", duration_ns: float | str = "inf") -> None:
        duration = math.inf if duration_ns in ("inf", math.inf) else int(duration_ns)
        key = "all" if session == "all" else self._session(int(session)).session_id
        self.host.delays[key] = duration


# -- frames an attacker can build from what it sees on the wire -----------------------

def _frame(machine, options: bytes, dst_ip: bytes, payload: bytes = b"attack") -> bytes:
    from .net.packets import ETH_IPV4, PROTO_UDP, Ethernet, IPv4, Udp
    src_ip = bytes([192, 0, 2, 66])
    udp = Udp(6666, 7, payload).pack(src_ip, dst_ip)
    ip = IPv4(src_ip, dst_ip, PROTO_UDP, udp, options, 0x4242)
    return Ethernet(machine.nic.mac, bytes.fromhex("020000000066"), ETH_IPV4, ip.pack()).pack()


def _address_of(machine, session) -> bytes:
    entry = machine.ssv.flows.entries.get(session.epid)
    return entry.ipv4 if entry is not None else bytes([10, 0, 0, 1])


def tagged_frame(machine, session, payload: bytes = b"attack") -> bytes:
    """A UDP frame carrying the session's flow tag (tags are visible on the wire)."""
    return _frame(machine, flow_tag(session.epid), _address_of(machine, session), payload)


def untagged_frame(machine, payload: bytes = b"foreign") -> bytes:
    dst = bytes([10, 0, 0, 1])
    if machine.sessions:
        dst = _address_of(machine, machine.sessions[0])
    return _frame(machine, b"", dst, payload)
