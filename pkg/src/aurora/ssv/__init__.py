from .drivers import ClockDriver, Driver, NicDriver
from .flows import DEFAULT_PATTERN, FlowEntry, FlowTable, flow_tag
from .heap import Block, SecureHeap
from .supervisor import SmmSupervisor, TssRequest

__all__ = [
    "ClockDriver", "Driver", "NicDriver", "DEFAULT_PATTERN", "FlowEntry", "FlowTable",
    "flow_tag", "Block", "SecureHeap", "SmmSupervisor", "TssRequest",
]
