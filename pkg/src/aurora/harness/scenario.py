"""Scenario files: JSON documents validated against SCHEMA."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from ..errors import ConfigInvalid

WORKLOADS = ("time", "clock_batched", "ping", "udp_echo", "tcp_transfer", "idle")

SCHEMA = {
    "type": "object",
    "required": ["name", "enclaves"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "duration_ns": {"type": "integer", "minimum": 1},
        "platform": {"type": "object", "additionalProperties": {"type": "integer"}},
        "clocks": {"type": "object"},
        "costs": {"type": "object", "additionalProperties": {"type": "integer"}},
        "machine": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "uio": {"type": "boolean"},
                "fifo_capacity": {"type": "integer", "minimum": 1},
                "timeout_ns": {"type": "integer", "minimum": 1},
                "ring_len": {"type": "integer", "minimum": 2},
                "promiscuous": {"type": "boolean"},
            },
        },
        "enclaves": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "workload"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "workload": {"enum": list(WORKLOADS)},
                    "register": {"type": "boolean"},
                    "ipv4": {"type": "string"},
                    "peer": {"type": "string"},
                    "count": {"type": "integer", "minimum": 0},
                    "interval_ns": {"type": "integer", "minimum": 0},
                    "jitter": {"type": "number", "minimum": 0, "maximum": 1},
                    "batch": {"type": "integer", "minimum": 1},
                    "payload_size": {"type": "integer", "minimum": 0},
                    "bytes": {"type": "integer", "minimum": 0},
                    "start_ns": {"type": "integer", "minimum": 0},
                },
            },
        },
        "attacks": {"type": "array", "items": {"type": ["string", "object"]}},
    },
}


@dataclass
class EnclaveSpec:
    name: str
    workload: str
    register: bool = True
    ipv4: str | None = None
    peer: str | None = None
    count: int = 10
    interval_ns: int = 1_000_000
    jitter: float = 0.0
    batch: int = 8
    payload_size: int = 56
    bytes: int = 65536
    start_ns: int = 0

    @property
    def networked(self) -> bool:
        return self.workload in ("ping", "udp_echo", "tcp_transfer") or self.ipv4 is not None


@dataclass
class Scenario:
    name: str
    enclaves: list[EnclaveSpec]
    seed: int = 0
    duration_ns: int = 10_000_000_000
    platform: dict = field(default_factory=dict)
    clocks: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    machine: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)
    description: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigInvalid(f"scenario: {exc.message}") from exc
        data = dict(data)
        enclaves = [EnclaveSpec(**e) for e in data.pop("enclaves")]
        names = [e.name for e in enclaves]
        if len(set(names)) != len(names):
            raise ConfigInvalid("enclave names must be unique")
        for e in enclaves:
            if e.workload in ("ping", "udp_echo", "tcp_transfer") and e.peer not in names:
                raise ConfigInvalid(f"enclave {e.name}: workload {e.workload} needs a peer")
        return cls(enclaves=enclaves, **data)

    def to_dict(self) -> dict:
        out = {"name": self.name, "seed": self.seed, "duration_ns": self.duration_ns,
               "enclaves": [{k: v for k, v in vars(e).items() if v is not None}
                            for e in self.enclaves]}
        for key in ("platform", "clocks", "costs", "machine", "attacks", "description"):
            if getattr(self, key):
                out[key] = getattr(self, key)
        return out

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        return cls.from_dict(data)


# -- shipped data ----------------------------------------------------------------

def _data_dir(kind: str):
    return resources.files("aurora") / "data" / kind


def shipped(kind: str) -> dict[str, object]:
    """name -> resource for the shipped scenarios or attacks."""
    out = {}
    for entry in _data_dir(kind).iterdir():
        if entry.name.endswith(".json"):
            out[entry.name[:-5]] = entry
    return dict(sorted(out.items()))


def resolve(kind: str, ref) -> dict:
    """Load a shipped item by name, or a file by path."""
    if isinstance(ref, dict):
        return ref
    items = shipped(kind)
    if ref in items:
        return json.loads(items[ref].read_text())
    path = Path(ref)
    if path.exists():
        return json.loads(path.read_text())
    raise ConfigInvalid(f"no {kind[:-1]} named {ref!r}")


def load_scenario(ref) -> Scenario:
    return Scenario.from_dict(resolve("scenarios", ref))
