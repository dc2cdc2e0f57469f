"""BSD-style sockets over an enclave stack.

Blocking calls drive the stack's scheduler until they can complete or the
socket timeout (virtual nanoseconds) expires.  Non-blocking sockets raise
WouldBlock instead of waiting.
"""

from __future__ import annotations

import enum

from ..errors import NetError, NetTimeout, SocketClosed, WouldBlock
from .packets import ip_bytes, ip_str
from .tcp import TcpState

AF_INET = 2


class SocketKind(enum.Enum):
    UDP = "Udp"
    TCP = "Tcp"
    RAW_ICMP = "RawIcmp"


SOCK_STREAM = SocketKind.TCP
SOCK_DGRAM = SocketKind.UDP
SOCK_RAW = SocketKind.RAW_ICMP

DEFAULT_TIMEOUT_NS = 2_000_000_000


class Socket:
    _ids = 0

    def __init__(self, stack, kind: SocketKind = SOCK_STREAM):
        Socket._ids += 1
        self.id = Socket._ids
        self.stack = stack
        self.kind = kind
        self.blocking = True
        self.timeout_ns = DEFAULT_TIMEOUT_NS
        self.port = 0
        self.peer: tuple[str, int] | None = None
        self.tcb = None
        self.listener = None
        self.pcb = None
        self.closed = False

    def __repr__(self) -> str:
        return f"<Socket {self.id} {self.kind.value} {self.state}>"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def state(self) -> str:
        tcb = self.tcb or self.listener
        if tcb is not None:
            return tcb.state.value
        return "CLOSED" if self.closed else "OPEN"

    def setblocking(self, flag: bool) -> None:
        self.blocking = flag

    def settimeout(self, timeout_ns: int | None) -> None:
        self.blocking = timeout_ns != 0
        self.timeout_ns = DEFAULT_TIMEOUT_NS if timeout_ns is None else timeout_ns

    def _check_open(self) -> None:
        if self.closed:
            raise SocketClosed(f"socket {self.id} is closed")

    def _wait(self, ready) -> None:
        if ready():
            return
        if not self.blocking:
            self.stack.get_world().step()
            if ready():
                return
            raise WouldBlock("operation would block")
        self.stack.get_world().run_until(ready, self.timeout_ns)

    # -- addressing ---------------------------------------------------------------

    def bind(self, address: tuple[str, int]) -> None:
        self._check_open()
        host, port = address
        if host not in ("", "0.0.0.0") and ip_bytes(host) != self.stack.ipv4:
            raise NetError(f"cannot bind to {host}")
        if self.kind is SOCK_DGRAM:
            self.pcb = self.stack.udp_bind(port)
            self.port = self.pcb.port
        else:
            self.port = port or self.stack.ephemeral_port()

    def getsockname(self) -> tuple[str, int]:
        return ip_str(self.stack.ipv4), self.port

    # -- TCP ----------------------------------------------------------------------

    def listen(self, backlog: int = 8) -> None:
        self._check_open()
        if self.kind is not SOCK_STREAM:
            raise NetError("listen on a non-stream socket")
        self.listener = self.stack.tcp_listen(self.port, backlog)

    def accept(self) -> tuple["Socket", tuple[str, int]]:
        self._check_open()
        if self.listener is None:
            raise NetError("socket is not listening")
        self._wait(lambda: bool(self.listener.accept_queue))
        tcb = self.listener.accept_queue.popleft()
        conn = Socket(self.stack, SOCK_STREAM)
        conn.tcb, conn.port = tcb, tcb.local[1]
        conn.peer = (ip_str(tcb.remote[0]), tcb.remote[1])
        conn.blocking, conn.timeout_ns = self.blocking, self.timeout_ns
        return conn, conn.peer

    def connect(self, address: tuple[str, int]) -> None:
        self._check_open()
        host, port = address
        self.peer = (host, port)
        if self.kind is SOCK_DGRAM:
            if self.pcb is None:
                self.bind(("", 0))
            return
        self.tcb = self.stack.tcp_connect(self.port, host, port)
        self.port = self.tcb.local[1]
        tcb = self.tcb
        try:
            self._wait(lambda: tcb.state is not TcpState.SYN_SENT)
        except NetTimeout:
            tcb.abort()
            raise
        if tcb.error is not None:
            raise tcb.error

    def _stream(self):
        self._check_open()
        if self.tcb is None:
            raise SocketClosed("socket is not connected")
        if self.tcb.error is not None:
            raise self.tcb.error
        return self.tcb

    def send(self, data: bytes) -> int:
        if self.kind is SOCK_DGRAM:
            if self.peer is None:
                raise NetError("datagram socket has no peer")
            return self.sendto(data, self.peer)
        tcb = self._stream()
        if tcb.close_requested or tcb.state not in (TcpState.ESTABLISHED, TcpState.CLOSE_WAIT):
            raise SocketClosed(f"cannot send in state {tcb.state.value}")
        self._wait(lambda: len(tcb.sndbuf) < self.stack.config.sndbuf or tcb.error is not None)
        if tcb.error is not None:
            raise tcb.error
        return tcb.write(data)

    def sendall(self, data: bytes) -> None:
        view = memoryview(data)
        while view:
            sent = self.send(bytes(view[:self.stack.config.sndbuf]))
            view = view[sent:]

    def flush(self) -> None:
        """Block until every byte written so far is acknowledged."""
        tcb = self._stream()
        self._wait(lambda: (not tcb.sndbuf and not tcb.unacked) or tcb.error is not None)
        if tcb.error is not None:
            raise tcb.error

    def recv(self, bufsize: int) -> bytes:
        if self.kind is SOCK_DGRAM:
            return self.recvfrom(bufsize)[0]
        tcb = self._stream()
        self._wait(lambda: bool(tcb.recvbuf) or tcb.fin_received or tcb.error is not None
                   or tcb.state is TcpState.CLOSED)
        if tcb.recvbuf:
            data = bytes(tcb.recvbuf[:bufsize])
            del tcb.recvbuf[:len(data)]
            return data
        if tcb.error is not None:
            raise tcb.error
        return b""

    def recv_exactly(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            chunk = self.recv(n - len(out))
            if not chunk:
                break
            out += chunk
        return bytes(out)

    # -- UDP ----------------------------------------------------------------------

    def sendto(self, data: bytes, address: tuple[str, int]) -> int:
        self._check_open()
        if self.kind is not SOCK_DGRAM:
            raise NetError("sendto on a non-datagram socket")
        if self.pcb is None:
            self.bind(("", 0))
        self.stack.udp_send(self.port, address[0], address[1], data)
        return len(data)

    def recvfrom(self, bufsize: int) -> tuple[bytes, tuple[str, int]]:
        self._check_open()
        if self.kind is SOCK_RAW:
            raise NetError("use ping() on raw ICMP sockets")
        pcb = self.pcb
        if pcb is None:
            raise NetError("socket is not bound")
        self._wait(lambda: bool(pcb.queue))
        data, addr = pcb.queue.popleft()
        return data[:bufsize], addr

    # -- ICMP ---------------------------------------------------------------------

    def ping(self, host: str, payload: bytes = bytes(56), count: int = 1) -> list[int]:
        self._check_open()
        return self.stack.icmp_echo(host, payload, count, self.timeout_ns)

    # -- teardown -------------------------------------------------------------------

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.pcb is not None:
            self.stack.udp_unbind(self.port)
        if self.listener is not None:
            self.listener.close()
        if self.tcb is not None and self.tcb.state is not TcpState.CLOSED:
            self.tcb.close()


def socket(stack, kind: SocketKind = SOCK_STREAM) -> Socket:
    return Socket(stack, kind)


__all__ = ["AF_INET", "SOCK_DGRAM", "SOCK_RAW", "SOCK_STREAM", "Socket", "SocketKind",
           "socket"]
