import struct

import pytest

from aurora.channel.frames import FRAME_SIZE, Device, Operation
from aurora.channel.protocol import pack_flow
from aurora.channel.session import Batched
from aurora.errors import (
    BoundaryViolation, OperationUnsupported, OutOfMemory, TagCollision, Timeout, UnknownDevice,
)
from aurora.platform import OS, SMM, SSV, TO_SSV
from aurora.ssv.flows import FlowEntry, FlowTable, carries_tag, flow_tag, ipv4_options
from aurora.ssv.heap import SecureHeap

IP_A = bytes([10, 0, 0, 5])
IP_B = bytes([10, 0, 0, 6])


def _ipv4_frame(dst_mac: bytes, dst_ip: bytes, options: bytes = b"") -> bytes:
    ihl = 5 + len(options) // 4
    header = struct.pack(">BBHHHBBH4s4s", 0x40 | ihl, 0, ihl * 4 + 8, 0, 0, 64, 17, 0,
                         bytes([10, 0, 0, 1]), dst_ip)
    return dst_mac + b"\x02" * 6 + b"\x08\x00" + header + options + bytes(8)


# -- flow tags ------------------------------------------------------------------------

def test_flow_tag_encoding():
    assert flow_tag(bytes.fromhex("00112233aabb")) == bytes([0x88, 4, 0xAA, 0xBB])


def test_tag_must_sit_on_a_word_boundary():
    tag = bytes([0x88, 4, 1, 2])
    assert carries_tag(b"\x01\x01\x01\x01" + tag, tag)
    assert not carries_tag(b"\x01\x01" + tag + b"\x01\x01", tag)


def test_ipv4_options_parse():
    opts = bytes([0x88, 4, 1, 2])
    assert ipv4_options(_ipv4_frame(bytes(6), IP_A, opts)) == (opts, IP_A)
    assert ipv4_options(_ipv4_frame(bytes(6), IP_A)) == (b"", IP_A)
    arp = bytes(12) + b"\x08\x06" + bytes(28)
    assert ipv4_options(arp) is None


def test_flow_table_collisions_and_classify():
    table = FlowTable()
    a = FlowEntry(b"A" * 16, 1, flow_tag(b"\x00\x01"), IP_A)
    table.register(a)
    with pytest.raises(TagCollision):
        table.register(FlowEntry(b"B" * 16, 2, a.tag, IP_B))
    with pytest.raises(TagCollision):
        table.register(FlowEntry(b"B" * 16, 2, flow_tag(b"\x00\x02"), IP_A))
    b = FlowEntry(b"B" * 16, 2, flow_tag(b"\x00\x02"), IP_B)
    table.register(b)
    table.register(a)           # re-registering your own flow is fine
    assert len(table) == 2
    assert table.classify(_ipv4_frame(bytes(6), IP_B, b.tag)) == b
    # right tag, wrong address, and the reverse
    assert table.classify(_ipv4_frame(bytes(6), IP_B, a.tag)) is None
    assert table.classify(_ipv4_frame(bytes(6), IP_A)) is None
    assert table.by_session(1) == a
    table.unregister(a.epid)
    assert a.epid not in table


# -- secure heap --------------------------------------------------------------------------

@pytest.fixture
def heap(machine):
    machine.platform.mode = SMM     # SMRAM is only reachable from the supervisor
    return SecureHeap(machine.platform, 0x20000, 4096)


def test_heap_first_fit_reuses_hole(heap):
    a, b, c = heap.alloc(1000), heap.alloc(1000), heap.alloc(1000)
    assert [x.offset - heap.arena_offset for x in (a, b, c)] == [0, 1000, 2000]
    heap.free(b)
    assert heap.alloc(600).offset == b.offset
    assert heap.alloc(600).offset == c.offset + 1000
    assert heap.peak == 3200


def test_heap_bounds_and_exhaustion(heap):
    block = heap.alloc(64)
    block.write(60, b"abcd")
    assert block.read(60, 4) == b"abcd"
    with pytest.raises(BoundaryViolation):
        block.write(61, b"abcd")
    with pytest.raises(BoundaryViolation):
        block.read(-1, 2)
    assert len(heap.violations) == 2
    with pytest.raises(OutOfMemory):
        heap.alloc(4096)
    with pytest.raises(ValueError):
        heap.alloc(0)


def test_heap_free_scrubs_and_kills_handle(heap, machine):
    block = heap.alloc(16)
    block.write(0, b"secret-material!")
    heap.reset()
    assert not heap.live
    assert machine.platform.read(SSV, machine.platform.smram, block.offset, 16) == bytes(16)
    with pytest.raises(BoundaryViolation):
        block.read(0, 1)


def test_heap_arena_inside_smram(machine):
    with pytest.raises(ValueError):
        SecureHeap(machine.platform, machine.platform.smram.size - 10, 4096)


# -- supervisor ------------------------------------------------------------------------------

@pytest.fixture
def session(machine):
    return machine.open_session(machine.create_enclave())


def test_tampered_request_is_dropped_and_counted(machine, session):
    pending = session.request(Device.CLOCK, Operation.READ, b"", Batched(2))
    p = machine.platform
    offset = session.fifo_to_ssv.slot_offset(0) + 100
    p.write(OS, p.shared, offset, bytes([p.read(OS, p.shared, offset, 1)[0] ^ 1]))
    session.flush()
    with pytest.raises(Timeout):
        pending.result()
    assert machine.ssv.counters["drop_AuthFail"] == 1
    assert machine.ssv.counters["frames_dropped"] == 1
    assert machine.ssv.drop_log[-1][1:] == (session.session_id, "AuthFail")


def test_driver_errors_come_back_as_status(machine, session):
    with pytest.raises(UnknownDevice):
        session.request(0x7E, Operation.READ)
    with pytest.raises(OperationUnsupported):
        session.request(Device.CLOCK, 0x55)
    assert machine.ssv.counters["error_UnknownDevice"] == 1
    # the session keeps working afterwards
    assert session.request(Device.CLOCK, Operation.PROBE)


def test_flow_collision_reported_to_second_enclave(machine, session):
    tag = flow_tag(session.enclave.epid)
    session.request(Device.CONTROL, Operation.WRITE, pack_flow(tag, IP_A, None))
    other = machine.open_session(machine.create_enclave())
    with pytest.raises(TagCollision):
        other.request(Device.CONTROL, Operation.WRITE, pack_flow(tag, IP_B, None))


def test_dispatch_leaves_no_secrets(machine, session):
    for _ in range(5):
        session.request(Device.CLOCK, Operation.READ)
    assert machine.ssv.hygiene_violations == []
    assert not machine.ssv.heap.live
    assert machine.ssv.counters["dispatches"] == machine.platform.smi_count


def test_scan_rx_routes_tagged_frames(machine, session):
    tag = flow_tag(session.enclave.epid)
    session.request(Device.CONTROL, Operation.WRITE, pack_flow(tag, IP_A, None))
    before = machine.ssv.counters["rx_delivered"]
    machine.nic.receive(_ipv4_frame(machine.config.mac, IP_A, tag))
    machine.nic.receive(_ipv4_frame(machine.config.mac, IP_A))      # untagged, for the OS
    assert machine.ssv.counters["rx_delivered"] == before + 1
    assert len(machine.nic.nic_rx_scan(OS)) == 1
    events = session.poll()
    assert [e.device for e in events] == [Device.NIC]


def test_frame_for_vanished_session_is_not_a_drop(machine, session):
    tag = flow_tag(session.enclave.epid)
    ssv = machine.ssv
    ssv.flows.register(FlowEntry(b"Z" * 16, 999, tag[:2] + b"zz", IP_B))
    machine.platform.redirection.route(machine.nic.vector, TO_SSV)
    machine.nic.receive(_ipv4_frame(machine.config.mac, IP_B, tag[:2] + b"zz"))
    assert ssv.counters["rx_unknown_session"] == 1
    assert ssv.counters["frames_dropped"] == 0


def test_shared_writes_are_whole_frames(machine, session):
    sizes = []
    machine.platform.write_observers.append(
        lambda actor, dom, off, data, tag: sizes.append(len(data))
        if dom is machine.platform.shared else None)
    session.request(Device.CLOCK, Operation.READ)
    assert sizes and set(sizes) == {FRAME_SIZE}
