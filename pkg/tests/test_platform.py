import pytest

from aurora.costs import MS, US, CostTable
from aurora.errors import Fault, FaultKind, PlatformFault
from aurora.platform import (
    ADVERSARY, MAILBOX_SMI, OS, SMM, SOFTWARE_SMI, SSV, TO_OS, TO_SSV, DomainKind, Op, Platform,
    Protected, enclave_actor, notify_target, permitted,
)


@pytest.fixture
def platform():
    p = Platform(seed=3)
    p.create_epc(1)
    p.create_epc(2)
    return p


# expected isolation table, written out by hand
#   actor        mode          Smram Shared Untrusted Epc1 Epc2
RULES = [
    ("os", Protected(), (0, 1, 1, 0, 0)),
    ("adversary", Protected(), (0, 1, 1, 0, 0)),
    ("ssv", Protected(), (0, 0, 0, 0, 0)),
    ("e1", Protected(1), (0, 1, 1, 1, 0)),
    ("e1", Protected(), (0, 0, 0, 0, 0)),
    ("e1", Protected(2), (0, 0, 0, 0, 0)),
    ("e2", Protected(2), (0, 1, 1, 0, 1)),
    ("os", SMM, (0, 0, 0, 0, 0)),
    ("adversary", SMM, (0, 0, 0, 0, 0)),
    ("ssv", SMM, (1, 1, 1, 0, 0)),
    ("e1", SMM, (0, 0, 0, 0, 0)),
]
ACTORS = {"os": OS, "adversary": ADVERSARY, "ssv": SSV, "e1": enclave_actor(1),
          "e2": enclave_actor(2)}


@pytest.mark.parametrize("actor,mode,row", RULES)
def test_isolation_table(platform, actor, mode, row):
    domains = [platform.smram, platform.shared, platform.untrusted, platform.epc[1],
               platform.epc[2]]
    assert tuple(int(permitted(ACTORS[actor], d, mode)) for d in domains) == row


def test_forbidden_access_is_a_fault_value(platform):
    platform.epc[1].contents[:4] = b"KEYS"
    result = platform.access(OS, platform.epc[1], 0, Op.READ, size=4)
    assert isinstance(result, Fault)
    assert result.kind is FaultKind.ACCESS_VIOLATION
    assert platform.faults == [result]
    assert platform.event_log[-1][1] == "fault"


def test_forbidden_write_leaves_contents(platform):
    before = bytes(platform.smram.contents[:64])
    assert isinstance(platform.access(ADVERSARY, platform.smram, 0, Op.WRITE, data=b"x" * 64),
                      Fault)
    assert bytes(platform.smram.contents[:64]) == before


def test_out_of_bounds(platform):
    r = platform.access(OS, platform.shared, platform.shared.size - 2, Op.READ, size=4)
    assert r.kind is FaultKind.OUT_OF_BOUNDS


def test_read_write_raise_platform_fault(platform):
    with pytest.raises(PlatformFault):
        platform.read(OS, platform.smram, 0, 1)
    platform.write(OS, platform.shared, 8, b"ok")
    assert platform.read(OS, platform.shared, 8, 2) == b"ok"


def test_write_observers_see_tag(platform):
    seen = []
    platform.write_observers.append(lambda *a: seen.append(a))
    platform.write(OS, platform.shared, 0, b"abc", tag="t")
    assert seen == [(OS, platform.shared, 0, b"abc", "t")]


def test_smi_saves_and_restores_context(platform):
    platform.enter_enclave(1)
    regs = bytes(platform.regs)
    seen = {}

    def handler(source):
        seen["mode"] = platform.mode
        seen["source"] = source
        platform.scribble_registers()

    platform.smi_handler = handler
    start = platform.now
    assert platform.trigger_smi(SOFTWARE_SMI) is None
    assert seen["mode"] == SMM and seen["source"] is SOFTWARE_SMI
    assert platform.mode == Protected(1)
    assert bytes(platform.regs) == regs
    assert platform.now - start == platform.costs.smm_switch + platform.costs.smm_return
    assert platform.smi_count == 1


def test_smi_reentrancy_and_stray_rsm(platform):
    inner = []
    platform.smi_handler = lambda s: inner.append(platform.trigger_smi(MAILBOX_SMI))
    platform.trigger_smi()
    assert inner[0].kind is FaultKind.REENTRANCY
    assert platform.rsm().kind is FaultKind.NOT_IN_SMM


def test_enter_enclave_in_smm_faults(platform):
    platform.smi_handler = lambda s: platform.enter_enclave(1)
    with pytest.raises(PlatformFault):
        platform.trigger_smi()


def test_interrupt_routing(platform):
    platform.redirection.register(0x30)
    platform.redirection.register(0x31)
    platform.redirection.route(0x31, notify_target(2))
    assert platform.redirection.get(0x30) is TO_OS
    platform.raise_interrupt(0x30, "x")
    platform.raise_interrupt(0x31)
    assert [i.vector for i in platform.os_queue] == [0x30]
    assert [i.vector for i in platform.notify_queues[2]] == [0x31]
    assert platform.raise_interrupt(0x99).kind is FaultKind.UNKNOWN_VECTOR


def test_interrupts_raised_in_smm_are_latched(platform):
    platform.redirection.route(0x40, TO_SSV)
    order = []

    def handler(source):
        order.append(source.vector)
        if len(order) == 1:
            platform.raise_interrupt(0x40, "rx")
            assert list(platform.pending) == [(0x40, "rx")]

    platform.smi_handler = handler
    platform.trigger_smi(SOFTWARE_SMI)
    # the latched interrupt became a second SMI right after RSM
    assert order == [None, 0x40]
    assert platform.smi_count == 2 and not platform.pending


def test_events_deferred_until_rsm(platform):
    got = []
    platform.subscribe(lambda e, info: got.append((e, platform.in_smm)))

    def handler(source):
        platform.emit("inside")
        assert got == []

    platform.smi_handler = handler
    platform.trigger_smi()
    platform.emit("outside")
    assert got == [("inside", False), ("outside", False)]


def test_advance_and_charge(platform):
    platform.cost_ledger = []
    platform.advance(5, "wait")
    assert platform.charge("smm_switch") == 13 * US
    assert platform.now == 5 + 13 * US
    assert platform.cost_ledger == [("wait", 5), ("smm_switch", 13 * US)]


def test_domain_names(platform):
    assert platform.epc[1].name == "Epc(1)"
    assert platform.shared.kind is DomainKind.SHARED
    assert str(Protected()) == "Protected(Os)"


# -- costs -----------------------------------------------------------------------

def test_cost_table_defaults():
    c = CostTable()
    steps = [c.epc_encrypt, c.copy_to_shared, c.smm_switch, c.copy_to_smram, c.smram_decrypt,
             c.smram_encrypt, c.copy_to_shared_smm, c.smm_return, c.copy_to_epc, c.epc_decrypt]
    assert steps == [2 * US, 2 * US, 13 * US, 0, 3 * US, 3 * US, 0, 12 * US, 3 * US, 2 * US]
    assert c.rtc_read == 14 * US and c.clock_assemble == 20 * US
    assert c.timer_read == 2500


def test_cost_table_roundtrip_keeps_extras():
    c = CostTable.from_dict({"nic_tx": 7 * MS})
    assert CostTable.from_dict(c.to_dict()) == c
    assert CostTable.zero().smm_switch == 0
    # unknown entries are kept for extensions rather than rejected
    assert CostTable.from_dict({"warp_drive": 1}).extra == {"warp_drive": 1}
