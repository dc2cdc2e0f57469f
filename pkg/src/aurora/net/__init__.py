"""In-enclave network stack bound to the secure channel."""

from .socket import SOCK_DGRAM, SOCK_RAW, SOCK_STREAM, Socket, socket
from .stack import StackConfig, StackInstance, stack_init
from .tcp import TcpState
from .world import World

__all__ = ["SOCK_DGRAM", "SOCK_RAW", "SOCK_STREAM", "Socket", "StackConfig", "StackInstance",
           "TcpState", "World", "socket", "stack_init"]
