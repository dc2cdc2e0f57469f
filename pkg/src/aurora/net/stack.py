"""Per-thread enclave network stack.

The secure channel is the link layer: every outgoing Ethernet frame becomes
one NIC write request sealed by the session, and every incoming frame is a
sealed device event opened by the session.  There is no other path in or
out.  Each stack belongs to exactly one thread of control and shares no
state with its siblings.
"""

from __future__ import annotations

import random
from collections import Counter, deque
from dataclasses import dataclass, field

from ..channel.frames import Device, Operation
from ..channel.protocol import CMD_UNFLOW, NicInfo, pack_flow
from ..channel.session import Session
from ..errors import (AddressInUse, AuroraError, ChannelError, NetError, NetTimeout,
                      ProbeFailed, TagCollision)
from ..ssv.flows import TAG_LEN, flow_tag
from . import packets
from .packets import (ACK, ETH_ARP, ETH_IPV4, ICMP_ECHO_REPLY, ICMP_ECHO_REQUEST,
                      PROTO_ICMP, PROTO_TCP, PROTO_UDP, RST, SYN, Ethernet, IcmpEcho, IPv4,
                      Reassembler, Tcp, Udp, ip_bytes)
from .tcp import Tcb, TcpState

EPHEMERAL = (49152, 65535)


@dataclass
class StackConfig:
    ipv4: str = "10.0.0.1"
    mtu: int = 1500
    arp: dict = field(default_factory=dict)          # ip -> mac (static)
    peer_tags: dict = field(default_factory=dict)    # ip -> flow tag of the peer stack
    notify: bool | None = None                       # None: use notifications when offered
    tcp_window: int = 8                              # segments in flight
    sndbuf: int = 256 * 1024
    rto_ns: int = 20_000_000
    max_rto_ns: int = 640_000_000
    max_retries: int = 8
    time_wait_ns: int = 2_000_000
    reassembly_timeout_ns: int = 1_000_000_000
    pool_buffers: int = 64
    pool_buffer_size: int = 2048
    udp_queue: int = 256

    @classmethod
    def from_dict(cls, data: dict | None) -> "StackConfig":
        cfg = cls()
        for key, value in (data or {}).items():
            setattr(cfg, key, value)
        return cfg


class PacketPool:
    """Fixed pool of equally sized packet buffers."""

    def __init__(self, count: int, size: int):
        self.size = size
        self.buffers = [bytearray(size) for _ in range(count)]
        self.free = deque(range(count))
        self.exhausted = 0

    def alloc(self, data: bytes) -> int | None:
        if not self.free or len(data) > self.size:
            self.exhausted += 1
            return None
        index = self.free.popleft()
        self.buffers[index][:len(data)] = data
        return index

    def release(self, index: int) -> None:
        self.free.append(index)


@dataclass
class UdpPcb:
    port: int
    queue: deque = field(default_factory=deque)
    closed: bool = False


class StackInstance:
    def __init__(self, session: Session, config: StackConfig, *, clock=None):
        self.session = session
        self.enclave = session.enclave
        self.platform = session.platform
        self.config = config
        self.clock = clock
        self.ipv4 = ip_bytes(config.ipv4)
        self.mac = b""
        self.flow_tag = flow_tag(session.epid)
        self.notify_vector: int | None = None
        self.arp = {ip_bytes(k): bytes.fromhex(v) if isinstance(v, str) else v
                    for k, v in config.arp.items()}
        self.peer_tags = {ip_bytes(k): bytes.fromhex(v) if isinstance(v, str) else v
                          for k, v in config.peer_tags.items()}
        # entropy comes from the enclave's own generator, never from the host
        with self.enclave.running():
            seed = self.enclave.random_bytes(16)
        self.rng = random.Random(seed)
        self.pool = PacketPool(config.pool_buffers, config.pool_buffer_size)
        self.rx_ring: deque[int] = deque()
        self.reassembler = Reassembler(config.reassembly_timeout_ns)
        self.udp: dict[int, UdpPcb] = {}
        self.tcp: dict[tuple, Tcb] = {}
        self.listeners: dict[int, Tcb] = {}
        self.stats: Counter = Counter()
        self.pings: dict[tuple[int, int], int] = {}
        self.ping_ident = self.rng.randrange(1 << 16)
        self.next_ident = self.rng.randrange(1 << 16)
        self.world = None
        self.failed: Exception | None = None
        self.delivered: list[bytes] = []      # ingress frames in delivery order
        self.keep_delivered = False
        self.up = False

    # -- basics ------------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.platform.now

    @property
    def eid(self) -> int:
        return self.enclave.eid

    @property
    def mode(self) -> str:
        return "notify" if self.notify_vector is not None else "poll"

    @property
    def options_len(self) -> int:
        return 2 * TAG_LEN

    @property
    def mss(self) -> int:
        return self.config.mtu - 20 - self.options_len - 20

    @property
    def window_bytes(self) -> int:
        return min(0xFFFF, self.config.tcp_window * self.mss)

    def _charge(self, nbytes: int) -> None:
        costs = self.platform.costs
        self.platform.advance(costs.stack_per_frame + costs.stack_ns_per_byte * nbytes, "stack")

    def isn(self) -> int:
        base = self.rng.randrange(1 << 32)
        if self.clock is not None:
            # RFC 793 style 4 us tick from the trusted clock
            base += self.clock.now().total_us // 4
        return base % (1 << 32)

    def ephemeral_port(self) -> int:
        lo, hi = EPHEMERAL
        for _ in range(hi - lo):
            port = self.rng.randint(lo, hi)
            if port not in self.udp and port not in self.listeners and \
                    not any(k[0] == port for k in self.tcp):
                return port
        raise AddressInUse("ephemeral ports exhausted")

    def get_world(self):
        if self.world is None:
            from .world import World
            World(self)
        return self.world

    # -- link layer -------------------------------------------------------------

    def transmit(self, frame: bytes) -> bool:
        """Hand one Ethernet frame to the SSV's NIC driver through the channel."""
        sealed_before = self.session.metrics.frames_sealed
        self._charge(len(frame))
        try:
            self.session.request(Device.NIC, Operation.WRITE, frame)
        except AuroraError as exc:
            self.stats["tx_errors"] += 1
            self.stats[f"tx_error_{exc.kind}"] += 1
            return False
        finally:
            if self.session.metrics.frames_sealed != sealed_before + 1:
                self.stats["bypass_violations"] += 1
        self.stats["tx_frames"] += 1
        return True

    def poll_events(self) -> list[bytes]:
        """Collect frames the SSV forwarded to this stack, in event order."""
        session = self.session
        drain = True
        if self.notify_vector is not None:
            queue = self.platform.notify_queues.get(self.eid)
            tokens = 0
            while queue:
                queue.popleft()
                tokens += 1
            self.stats["notify_tokens"] += tokens
            drain = tokens > 0
        events = session.poll() if drain else self._take_inbox()
        frames = []
        for plain in events:
            if plain.device != Device.NIC:
                continue
            index = self.pool.alloc(plain.payload)
            if index is None:
                self.stats["rx_pool_exhausted"] += 1
                continue
            self.rx_ring.append((index, len(plain.payload)))
            frames.append(plain.payload)
        self.stats["rx_events"] += len(events)
        return frames

    def _take_inbox(self) -> list:
        events = list(self.session.inbox)
        self.session.inbox.clear()
        return events

    def service(self) -> int:
        """One scheduling quantum: ingest events, process frames, run timers."""
        if self.failed is not None:
            return 0
        self.poll_events()
        work = 0
        while self.rx_ring:
            index, length = self.rx_ring.popleft()
            frame = bytes(self.pool.buffers[index][:length])
            self.pool.release(index)
            self.handle_frame(frame)
            work += 1
        self.run_timers()
        return work

    def run_timers(self) -> None:
        now = self.now
        for tcb in list(self.tcp.values()):
            tcb.tick(now)

    # -- ingress ------------------------------------------------------------------

    def handle_frame(self, frame: bytes) -> None:
        self._charge(len(frame))
        self.stats["rx_frames"] += 1
        if self.keep_delivered:
            self.delivered.append(frame)
        eth = Ethernet.parse(frame)
        if eth is None or eth.ethertype != ETH_IPV4:
            self.stats["rx_drop_non_ip"] += 1
            return
        pkt = IPv4.parse(eth.payload)
        if pkt is None:
            self.stats["rx_drop_malformed"] += 1
            return
        if pkt.dst != self.ipv4:
            self.stats["rx_drop_not_ours"] += 1
            return
        options = packets.split_options(pkt.options)
        if self.flow_tag not in options:
            self.stats["rx_drop_untagged"] += 1
            return
        if options and options[0] != self.flow_tag and len(options[0]) == TAG_LEN:
            self.peer_tags.setdefault(pkt.src, options[0])
        self.arp.setdefault(pkt.src, eth.src)
        whole = self.reassembler.push(pkt, self.now)
        if whole is None:
            self.stats["rx_fragments"] += 1
            return
        if whole.proto == PROTO_ICMP:
            self._icmp_input(whole)
        elif whole.proto == PROTO_UDP:
            self._udp_input(whole)
        elif whole.proto == PROTO_TCP:
            self._tcp_input(whole)
        else:
            self.stats["rx_drop_proto"] += 1

    # -- egress -------------------------------------------------------------------

    def options_for(self, dst: bytes) -> bytes:
        """Own tag first, then the receiving stack's tag when it is known."""
        peer = self.peer_tags.get(dst)
        if peer is not None and peer != self.flow_tag:
            return self.flow_tag + peer
        return self.flow_tag

    def send_ip(self, dst, proto: int, payload: bytes) -> int:
        dst = ip_bytes(dst)
        mac = self.arp.get(dst)
        if mac is None:
            self.stats["tx_no_route"] += 1
            raise NetError(f"no static ARP entry for {packets.ip_str(dst)}")
        self.next_ident = (self.next_ident + 1) & 0xFFFF
        pkt = IPv4(self.ipv4, dst, proto, payload, self.options_for(dst), self.next_ident)
        sent = 0
        for fragment in pkt.fragments(self.config.mtu):
            frame = Ethernet(mac, self.mac, ETH_IPV4, fragment.pack()).pack()
            sent += self.transmit(frame)
        return sent

    # -- ICMP ---------------------------------------------------------------------

    def _icmp_input(self, pkt: IPv4) -> None:
        msg = IcmpEcho.parse(pkt.payload)
        if msg is None:
            self.stats["rx_drop_checksum"] += 1
            return
        if msg.type == ICMP_ECHO_REQUEST:
            reply = IcmpEcho(ICMP_ECHO_REPLY, msg.ident, msg.seq, msg.payload)
            self.send_ip(pkt.src, PROTO_ICMP, reply.pack())
        elif msg.type == ICMP_ECHO_REPLY:
            key = (msg.ident, msg.seq)
            if key in self.pings and isinstance(self.pings[key], int):
                self.pings[key] = (self.pings[key], self.now, msg.payload)

    def icmp_echo(self, dst, payload: bytes = bytes(56), count: int = 1,
                  timeout_ns: int = 100_000_000) -> list[int]:
        """Echo requests to dst; returns one round-trip time per reply."""
        world = self.get_world()
        rtts = []
        for seq in range(count):
            key = (self.ping_ident, seq)
            self.pings[key] = self.now
            self.send_ip(dst, PROTO_ICMP, IcmpEcho(ICMP_ECHO_REQUEST, key[0], seq,
                                                   payload).pack())
            try:
                world.run_until(lambda: not isinstance(self.pings[key], int), timeout_ns)
            except NetTimeout:
                del self.pings[key]
                raise NetTimeout(f"echo {seq} to {packets.ip_str(ip_bytes(dst))} timed out")
            start, end, echoed = self.pings.pop(key)
            if echoed != payload:
                self.stats["icmp_payload_mismatch"] += 1
            rtts.append(end - start)
        self.ping_ident = (self.ping_ident + 1) & 0xFFFF
        return rtts

    # -- UDP ----------------------------------------------------------------------

    def udp_bind(self, port: int) -> UdpPcb:
        port = port or self.ephemeral_port()
        if port in self.udp:
            raise AddressInUse(f"udp port {port}")
        pcb = self.udp[port] = UdpPcb(port)
        return pcb

    def udp_unbind(self, port: int) -> None:
        pcb = self.udp.pop(port, None)
        if pcb is not None:
            pcb.closed = True

    def udp_send(self, sport: int, dst, dport: int, data: bytes) -> int:
        dst = ip_bytes(dst)
        return self.send_ip(dst, PROTO_UDP, Udp(sport, dport, data).pack(self.ipv4, dst))

    def _udp_input(self, pkt: IPv4) -> None:
        dgram = Udp.parse(pkt.payload, pkt.src, pkt.dst)
        if dgram is None:
            self.stats["rx_drop_checksum"] += 1
            return
        pcb = self.udp.get(dgram.dport)
        if pcb is None:
            self.stats["udp_no_port"] += 1
            return
        if len(pcb.queue) >= self.config.udp_queue:
            self.stats["udp_queue_overflow"] += 1
            return
        pcb.queue.append((dgram.payload, (packets.ip_str(pkt.src), dgram.sport)))

    # -- TCP ----------------------------------------------------------------------

    def send_tcp(self, dst: bytes, seg: Tcp) -> None:
        self.stats["tcp_segments_out"] += 1
        self.send_ip(dst, PROTO_TCP, seg.pack(self.ipv4, dst))

    def tcp_listen(self, port: int, backlog: int) -> Tcb:
        if port in self.listeners:
            raise AddressInUse(f"tcp port {port}")
        tcb = Tcb(self, (self.ipv4, port), None, state=TcpState.LISTEN, backlog=backlog)
        self.listeners[port] = tcb
        return tcb

    def tcp_connect(self, lport: int, dst, dport: int) -> Tcb:
        dst = ip_bytes(dst)
        lport = lport or self.ephemeral_port()
        key = (lport, dst, dport)
        if key in self.tcp:
            raise AddressInUse(f"tcp {lport}->{dport}")
        tcb = Tcb(self, (self.ipv4, lport), (dst, dport), iss=self.isn())
        self.tcp[key] = tcb
        tcb.open_active()
        return tcb

    def _tcb_closed(self, tcb: Tcb) -> None:
        if tcb.remote is None:
            if self.listeners.get(tcb.local[1]) is tcb:
                del self.listeners[tcb.local[1]]
            return
        key = (tcb.local[1], tcb.remote[0], tcb.remote[1])
        if self.tcp.get(key) is tcb:
            del self.tcp[key]

    def _tcp_input(self, pkt: IPv4) -> None:
        seg = Tcp.parse(pkt.payload, pkt.src, pkt.dst)
        if seg is None:
            self.stats["rx_drop_checksum"] += 1
            return
        self.stats["tcp_segments_in"] += 1
        tcb = self.tcp.get((seg.dport, pkt.src, seg.sport))
        if tcb is not None:
            tcb.input(seg)
            return
        listener = self.listeners.get(seg.dport)
        if listener is not None and seg.flags & SYN and not seg.flags & (ACK | RST):
            if len(listener.accept_queue) + self._half_open(listener) >= max(1, listener.backlog):
                self.stats["tcp_backlog_full"] += 1
                return
            child = Tcb(self, (self.ipv4, seg.dport), (pkt.src, seg.sport), iss=self.isn(),
                        state=TcpState.LISTEN)
            child.parent = listener
            child.irs = seg.seq
            child.rcv_nxt = (seg.seq + 1) % (1 << 32)
            self.tcp[(seg.dport, pkt.src, seg.sport)] = child
            child.set_state(TcpState.SYN_RCVD)
            child._queue(SYN | ACK)
            return
        if not seg.flags & RST:
            self._reset(pkt.src, seg)

    def _half_open(self, listener: Tcb) -> int:
        return sum(1 for t in self.tcp.values()
                   if t.parent is listener and t.state is TcpState.SYN_RCVD)

    def _reset(self, dst: bytes, seg: Tcp) -> None:
        """Answer a segment for which no connection exists."""
        self.stats["tcp_rst_sent"] += 1
        if seg.flags & ACK:
            rst = Tcp(seg.dport, seg.sport, seg.ack, 0, RST, 0)
        else:
            rst = Tcp(seg.dport, seg.sport, 0, (seg.seq + seg.seg_len) % (1 << 32),
                      RST | ACK, 0)
        self.send_tcp(dst, rst)

    # -- lifecycle ----------------------------------------------------------------

    def fail(self, error: Exception) -> None:
        """Stop this stack after an internal error; siblings are unaffected."""
        self.failed = error
        self.stats["faults"] += 1

    def close(self) -> None:
        try:
            self.session.request(Device.CONTROL, Operation.WRITE, CMD_UNFLOW)
        except ChannelError:
            pass
        if self.notify_vector is not None:
            self.session.host.drop_notify_relay(self.notify_vector)
            self.notify_vector = None
        self.up = False


def stack_init(session: Session, config: StackConfig | None = None, *,
               clock=None) -> StackInstance:
    """Probe the NIC through the SSV, register the flow tag and announce."""
    config = config or StackConfig()
    stack = StackInstance(session, config, clock=clock)
    try:
        info = NicInfo.unpack(session.request(Device.NIC, Operation.PROBE))
    except AuroraError as exc:
        raise ProbeFailed(f"NIC probe failed: {exc}") from exc
    if not info.link_up:
        raise ProbeFailed("NIC link down")
    stack.mac = info.mac
    vector = None
    if config.notify is not False:
        vector = session.host.create_notify_relay(stack.eid)
        if vector is None and config.notify:
            raise NetError("notification relay unavailable")
    try:
        session.request(Device.CONTROL, Operation.WRITE,
                        pack_flow(stack.flow_tag, stack.ipv4, vector))
    except TagCollision:
        if vector is not None:
            session.host.drop_notify_relay(vector)
        raise
    stack.notify_vector = vector
    stack.arp.setdefault(stack.ipv4, stack.mac)
    stack.transmit(packets.gratuitous_arp(stack.mac, stack.ipv4))
    stack.up = True
    return stack
