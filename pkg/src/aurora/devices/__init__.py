from .clocks import ALL_SOURCES, ClockBank, ClockConfig, RtcReading, Source
from .nic import DEVICE, HOST, MAX_FRAME, DescriptorRing, Fabric, Nic

__all__ = [
    "ALL_SOURCES", "ClockBank", "ClockConfig", "RtcReading", "Source",
    "DEVICE", "HOST", "MAX_FRAME", "DescriptorRing", "Fabric", "Nic",
]
