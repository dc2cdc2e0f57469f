import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aurora.costs import CostTable
from aurora.errors import AddressInUse, ConnRefused, WouldBlock
from aurora.machine import Machine
from aurora.net import SOCK_DGRAM, SOCK_STREAM, StackConfig, TcpState, World, socket, stack_init
from aurora.net.packets import IPv4, Reassembler, checksum, split_options

SRC = bytes([10, 0, 0, 1])
DST = bytes([10, 0, 0, 2])


# -- packets ----------------------------------------------------------------------

def test_checksum_known_values():
    # worked example from the Internet checksum RFC: the sum is 0xddf2
    assert checksum(bytes.fromhex("0001f203f4f5f6f7")) == 0xDDF2 ^ 0xFFFF
    # a well-known IPv4 header (192.168.0.1 -> 192.168.0.199), checksum 0xb861
    header = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")
    assert checksum(header) == 0xB861
    assert checksum(header[:10] + b"\xb8\x61" + header[12:]) == 0


def test_ipv4_roundtrip_and_bad_checksum():
    pkt = IPv4(SRC, DST, 17, b"payload", bytes([0x88, 4, 1, 2]), ident=7)
    raw = pkt.pack()
    assert raw[0] == 0x46 and IPv4.parse(raw) == pkt
    broken = raw[:12] + bytes([raw[12] ^ 1]) + raw[13:]
    assert IPv4.parse(broken) is None


def test_split_options():
    tag = bytes([0x88, 4, 0xAB, 0xCD])
    assert split_options(b"\x01" + tag + b"\x00\x88\x04") == [tag]


@settings(max_examples=40, deadline=None)
@given(size=st.integers(1, 9000), mtu=st.sampled_from([576, 1500]), seed=st.integers(0, 99))
def test_fragment_and_reassemble_any_order(size, mtu, seed):
    tag = bytes([0x88, 4, 0, 9])
    pkt = IPv4(SRC, DST, 17, random.Random(seed).randbytes(size), tag, ident=3)
    frags = pkt.fragments(mtu)
    assert all(f.header_len + len(f.payload) <= mtu for f in frags)
    assert all(f.options == tag for f in frags)
    random.Random(seed).shuffle(frags)
    r = Reassembler(10**9)
    out = [r.push(IPv4.parse(f.pack()), 0) for f in frags]
    assert [o for o in out if o is not None] == [IPv4(SRC, DST, 17, pkt.payload, tag, 3)]


def test_reassembly_timeout_and_dont_fragment():
    frags = IPv4(SRC, DST, 17, bytes(3000), ident=1).fragments(1500)
    r = Reassembler(1_000)
    assert r.push(frags[0], 0) is None
    assert r.push(frags[1], 5_000) is None     # the first fragment expired meanwhile
    assert r.expired == 1
    with pytest.raises(ValueError):
        IPv4(SRC, DST, 17, bytes(3000), dont_fragment=True).fragments(1500)


# -- stacks over the SSV ---------------------------------------------------------------

def _pair(seed=11, **cfg):
    m = Machine(seed=seed)
    stacks = [stack_init(m.open_session(m.create_enclave()),
                         StackConfig(ipv4=f"10.0.0.{i + 1}", **cfg)) for i in range(2)]
    world = World(*stacks)
    world.settle()
    return m, stacks, world


def _expected_rtt(costs: CostTable, payload: int) -> int:
    """Closed form: every step of both one-way trips is a fixed cost or a per-byte cost."""
    frame = 14 + 20 + 8 + 8 + payload          # eth, ip, two tag options, icmp
    stack = costs.stack_per_frame + costs.stack_ns_per_byte * frame
    wire = costs.wire_ns_per_byte * frame
    tx = (stack + costs.epc_encrypt + costs.copy_to_shared + costs.smm_switch
          + costs.copy_to_smram + costs.smram_decrypt + costs.nic_context + costs.nic_tx + wire
          + costs.smram_encrypt + costs.copy_to_shared_smm + costs.smm_return
          + costs.copy_to_epc + costs.epc_decrypt)
    rx = (costs.smm_switch + costs.nic_rx_scan + costs.smm_return + costs.copy_to_epc
          + costs.epc_decrypt + stack)
    return 2 * (tx + rx)


def test_icmp_rtt_matches_closed_form():
    m, (a, b), world = _pair()
    costs = m.platform.costs
    assert _expected_rtt(costs, 56) == 1_562_544
    for size in (0, 56, 512, 1400):
        assert a.icmp_echo("10.0.0.2", bytes(size), 2) == [_expected_rtt(costs, size)] * 2
    # 24 ns per payload byte: four stack passes and two wire crossings
    assert _expected_rtt(costs, 1057) - _expected_rtt(costs, 1056) == 24


def _udp_trace(notify: bool) -> list:
    m, (a, b), world = _pair(notify=notify)
    assert (a.notify_vector is not None) is notify
    client, server = socket(a, SOCK_DGRAM), socket(b, SOCK_DGRAM)
    server.bind(("", 7))
    client.bind(("", 5000))
    rng = random.Random(5)
    trace = []
    for _ in range(30):
        data = rng.randbytes(rng.randint(1, 2500))
        client.sendto(data, ("10.0.0.2", 7))
        got, addr = server.recvfrom(65535)
        server.sendto(got[::-1], addr)
        trace.append((addr, got, client.recvfrom(65535)))
    return trace


def test_notify_and_poll_deliver_the_same_traffic():
    assert _udp_trace(True) == _udp_trace(False)


def test_tcp_states_through_close():
    m, (a, b), world = _pair()
    listener = socket(b, SOCK_STREAM)
    listener.bind(("", 80))
    listener.listen()
    assert listener.state == "LISTEN"
    client = socket(a, SOCK_STREAM)
    client.connect(("10.0.0.2", 80))
    conn, peer = listener.accept()
    assert peer[0] == "10.0.0.1"
    assert client.tcb.state is conn.tcb.state is TcpState.ESTABLISHED
    data = random.Random(1).randbytes(100_000)
    client.sendall(data)
    assert conn.recv_exactly(len(data)) == data
    client.close()
    world.run_until(lambda: client.tcb.state is TcpState.FIN_WAIT_2, 10**9)
    assert conn.tcb.state is TcpState.CLOSE_WAIT
    assert conn.recv(10) == b""
    conn.close()
    world.run_until(lambda: conn.tcb.state is TcpState.CLOSED, 10**9)
    assert client.tcb.state in (TcpState.TIME_WAIT, TcpState.CLOSED)
    world.run_for(10_000_000)
    assert client.tcb.state is TcpState.CLOSED


def test_socket_errors():
    m, (a, b), world = _pair()
    with pytest.raises(ConnRefused):
        socket(a, SOCK_STREAM).connect(("10.0.0.2", 81))
    s = socket(b, SOCK_DGRAM)
    s.bind(("", 9))
    with pytest.raises(AddressInUse):
        socket(b, SOCK_DGRAM).bind(("", 9))
    s.setblocking(False)
    with pytest.raises(WouldBlock):
        s.recvfrom(100)
