"""TCP control block.

A deliberately small TCP: fixed window counted in segments, an ACK for
every in-order segment, no SACK, no window scaling, no congestion control,
no Nagle.  Loss recovery is go-back-N: on retransmission timeout every
unacknowledged segment is resent.  Out-of-order data is discarded and
answered with a duplicate ACK.
"""

from __future__ import annotations

import enum
from collections import deque

from ..errors import ConnRefused, NetTimeout, SocketClosed
from .packets import ACK, FIN, PSH, RST, SYN, Tcp

MOD = 1 << 32


def seq_lt(a: int, b: int) -> bool:
    return ((a - b) % MOD) >= (1 << 31)


def seq_le(a: int, b: int) -> bool:
    return a == b or seq_lt(a, b)


class TcpState(enum.Enum):
    CLOSED = "CLOSED"
    LISTEN = "LISTEN"
    SYN_SENT = "SYN_SENT"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"
    FIN_WAIT_1 = "FIN_WAIT_1"
    FIN_WAIT_2 = "FIN_WAIT_2"
    CLOSE_WAIT = "CLOSE_WAIT"
    LAST_ACK = "LAST_ACK"
    TIME_WAIT = "TIME_WAIT"


SYNCHRONIZED = {TcpState.ESTABLISHED, TcpState.FIN_WAIT_1, TcpState.FIN_WAIT_2,
                TcpState.CLOSE_WAIT, TcpState.LAST_ACK, TcpState.TIME_WAIT}
CAN_SEND = {TcpState.ESTABLISHED, TcpState.CLOSE_WAIT}
CAN_RECEIVE = {TcpState.ESTABLISHED, TcpState.FIN_WAIT_1, TcpState.FIN_WAIT_2}


class Tcb:
    def __init__(self, stack, local: tuple[bytes, int], remote: tuple[bytes, int] | None, *,
                 iss: int = 0, state: TcpState = TcpState.CLOSED, backlog: int = 0):
        self.stack = stack
        self.local = local
        self.remote = remote
        self.state = state
        self.history = [state]
        self.iss = iss
        self.snd_una = iss
        self.snd_nxt = iss
        self.irs = 0
        self.rcv_nxt = 0
        self.sndbuf = bytearray()
        self.recvbuf = bytearray()
        self.unacked: deque[Tcp] = deque()
        self.rto_deadline: int | None = None
        self.rto = stack.config.rto_ns
        self.retries = 0
        self.close_requested = False
        self.fin_sent = False
        self.fin_received = False
        self.error: Exception | None = None
        self.time_wait_until: int | None = None
        self.backlog = backlog
        self.accept_queue: deque[Tcb] = deque()
        self.parent: Tcb | None = None
        self.retransmissions = 0

    def __repr__(self) -> str:
        return f"<Tcb {self.local[1]}->{self.remote and self.remote[1]} {self.state.value}>"

    # -- helpers -----------------------------------------------------------------

    @property
    def mss(self) -> int:
        return self.stack.mss

    @property
    def window_segments(self) -> int:
        return self.stack.config.tcp_window

    def set_state(self, state: TcpState) -> None:
        if state is not self.state:
            self.state = state
            self.history.append(state)
            if state is TcpState.TIME_WAIT:
                self.time_wait_until = self.stack.now + self.stack.config.time_wait_ns
                self.rto_deadline = None
            elif state is TcpState.CLOSED:
                self.rto_deadline = None
                self.unacked.clear()
                self.stack._tcb_closed(self)

    def _emit(self, flags: int, seq: int, payload: bytes = b"") -> Tcp:
        ack = self.rcv_nxt if flags & ACK else 0
        seg = Tcp(self.local[1], self.remote[1], seq % MOD, ack % MOD, flags,
                  self.stack.window_bytes, payload)
        self.stack.send_tcp(self.remote[0], seg)
        return seg

    def _queue(self, flags: int, payload: bytes = b"") -> None:
        """Send a sequence-consuming segment and keep it for retransmission."""
        seg = self._emit(flags, self.snd_nxt, payload)
        self.unacked.append(seg)
        self.snd_nxt = (self.snd_nxt + seg.seg_len) % MOD
        if self.rto_deadline is None:
            self.rto_deadline = self.stack.now + self.rto

    def send_ack(self) -> None:
        self._emit(ACK, self.snd_nxt)

    def fail(self, error: Exception) -> None:
        self.error = error
        self.set_state(TcpState.CLOSED)

    # -- user calls -------------------------------------------------------------

    def open_active(self) -> None:
        self.set_state(TcpState.SYN_SENT)
        self._queue(SYN)

    def write(self, data: bytes) -> int:
        room = self.stack.config.sndbuf - len(self.sndbuf)
        taken = bytes(data[:max(0, room)])
        self.sndbuf += taken
        self.output()
        return len(taken)

    def close(self) -> None:
        if self.state in (TcpState.LISTEN, TcpState.SYN_SENT):
            self.set_state(TcpState.CLOSED)
            return
        self.close_requested = True
        self.output()

    def abort(self) -> None:
        if self.state in SYNCHRONIZED | {TcpState.SYN_RCVD}:
            self._emit(RST | ACK, self.snd_nxt)
        self.set_state(TcpState.CLOSED)

    # -- output -------------------------------------------------------------------

    def output(self) -> None:
        if self.state not in CAN_SEND:
            return
        while self.sndbuf and len(self.unacked) < self.window_segments:
            chunk = bytes(self.sndbuf[:self.mss])
            del self.sndbuf[:len(chunk)]
            self._queue(ACK | PSH, chunk)
        if self.close_requested and not self.fin_sent and not self.sndbuf \
                and len(self.unacked) < self.window_segments:
            self.fin_sent = True
            self._queue(FIN | ACK)
            self.set_state(TcpState.FIN_WAIT_1 if self.state is TcpState.ESTABLISHED
                           else TcpState.LAST_ACK)

    # -- input --------------------------------------------------------------------

    def input(self, seg: Tcp) -> None:
        if self.state is TcpState.SYN_SENT:
            self._input_syn_sent(seg)
            return
        if seg.flags & RST:
            if seq_le(self.rcv_nxt, seg.seq) or self.state is TcpState.SYN_RCVD:
                self.fail(SocketClosed("connection reset by peer"))
            return
        if seg.flags & SYN:
            # a retransmitted SYN: our SYN-ACK or ACK was lost
            if self.state is TcpState.SYN_RCVD and self.unacked:
                self._retransmit()
            elif self.state in SYNCHRONIZED:
                self.send_ack()
            return
        if not seg.flags & ACK:
            return
        self._process_ack(seg.ack)
        if self.state is TcpState.CLOSED:
            return
        if seg.payload or seg.flags & FIN:
            self._process_data(seg)
        self.output()

    def _input_syn_sent(self, seg: Tcp) -> None:
        acceptable = bool(seg.flags & ACK) and seg.ack == (self.iss + 1) % MOD
        if seg.flags & RST:
            if acceptable:
                self.fail(ConnRefused(f"port {self.remote[1]} refused the connection"))
            return
        if seg.flags & SYN and acceptable:
            self.irs = seg.seq
            self.rcv_nxt = (seg.seq + 1) % MOD
            self._process_ack(seg.ack)
            self.set_state(TcpState.ESTABLISHED)
            self.send_ack()
            self.output()

    def _process_ack(self, ack: int) -> None:
        if not (seq_lt(self.snd_una, ack) and seq_le(ack, self.snd_nxt)):
            return
        while self.unacked:
            head = self.unacked[0]
            if seq_le((head.seq + head.seg_len) % MOD, ack):
                self.unacked.popleft()
            else:
                break
        self.snd_una = ack
        self.retries = 0
        self.rto = self.stack.config.rto_ns
        self.rto_deadline = self.stack.now + self.rto if self.unacked else None
        if self.state is TcpState.SYN_RCVD:
            self.set_state(TcpState.ESTABLISHED)
            if self.parent is not None:
                self.parent.accept_queue.append(self)
        if self.fin_sent and ack == self.snd_nxt:
            if self.state is TcpState.FIN_WAIT_1:
                self.set_state(TcpState.TIME_WAIT if self.fin_received else TcpState.FIN_WAIT_2)
            elif self.state is TcpState.LAST_ACK:
                self.set_state(TcpState.CLOSED)

    def _process_data(self, seg: Tcp) -> None:
        if self.state is TcpState.TIME_WAIT:
            self.send_ack()
            return
        if seg.seq != self.rcv_nxt:
            self.stack.stats["tcp_out_of_order"] += 1
            self.send_ack()
            return
        if seg.payload and self.state in CAN_RECEIVE:
            self.recvbuf += seg.payload
            self.rcv_nxt = (self.rcv_nxt + len(seg.payload)) % MOD
        if seg.flags & FIN and not self.fin_received:
            self.fin_received = True
            self.rcv_nxt = (self.rcv_nxt + 1) % MOD
            if self.state is TcpState.ESTABLISHED:
                self.set_state(TcpState.CLOSE_WAIT)
            elif self.state is TcpState.FIN_WAIT_2:
                self.set_state(TcpState.TIME_WAIT)
            # FIN_WAIT_1 waits for the ACK of our own FIN, then goes to TIME_WAIT
        self.send_ack()

    # -- timers -------------------------------------------------------------------

    def _retransmit(self) -> None:
        for seg in self.unacked:
            self.stack.send_tcp(self.remote[0], Tcp(seg.sport, seg.dport, seg.seq,
                                                    self.rcv_nxt if seg.flags & ACK else 0,
                                                    seg.flags, seg.window, seg.payload))
            self.retransmissions += 1

    def tick(self, now: int) -> None:
        if self.state is TcpState.TIME_WAIT:
            if now >= self.time_wait_until:
                self.set_state(TcpState.CLOSED)
            return
        if self.rto_deadline is None or now < self.rto_deadline:
            return
        self.retries += 1
        if self.retries > self.stack.config.max_retries:
            self.fail(NetTimeout("retransmission limit reached"))
            return
        self.stack.stats["tcp_rto"] += 1
        self._retransmit()
        self.rto = min(self.rto * 2, self.stack.config.max_rto_ns)
        self.rto_deadline = now + self.rto
