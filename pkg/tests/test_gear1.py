import pytest
from hypothesis import settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from twogear.errors import ManifestOverlap, ManifestUnaligned, RtvmAffinityShared, SimError, UnknownHypercall
from twogear.gear1 import (ALREADY_ON_CODE, DENIED, OK, FaultKind, HypercallId, Ownership, Stage2Fault)
from twogear.machine import GICD_BASE, GICD_SGIR, PAGE_SIZE, AccessOp
from twogear.simcore import Prng

from conftest import build, run, two_secondaries

MIB = 1 << 20
BASES = {1: 0x4100_0000, 2: 0x4200_0000, 3: 0x4300_0000}
HOLES = {1: 0x0900_0000, 2: 0x0900_1000, 3: 0x0900_2000}


def three_vms() -> dict:
    vms = [{"id": v, "kind": "secondary", "affinity": [v], "memory": [[BASES[v], MIB]],
            "mmio_holes": [[HOLES[v], PAGE_SIZE]], "program": ["Wfi"]} for v in (1, 2, 3)]
    return {"seed": 3, "duration": 1_000_000, "platform": {"pcpus": 4}, "vms": vms}


def test_overlapping_manifests_rejected():
    doc = three_vms()
    doc["vms"][1]["memory"] = [[BASES[1] + PAGE_SIZE, MIB]]
    with pytest.raises(ManifestOverlap):
        build(doc)


def test_reserved_region_is_private():
    doc = three_vms()
    doc["vms"][0]["memory"] = [[0x4000_0000, MIB]]
    with pytest.raises(ManifestOverlap):
        build(doc)


def test_unaligned_region_rejected():
    doc = three_vms()
    doc["vms"][0]["memory"] = [[BASES[1] + 8, MIB]]
    with pytest.raises(ManifestUnaligned):
        build(doc)


def test_rtvm_pcpu_cannot_be_shared():
    doc = {"platform": {"pcpus": 4},
           "vms": [{"id": 0, "kind": "primary", "affinity": [0, 1, 2, 3]},
                   {"id": 1, "kind": "rtvm", "affinity": [3], "program": ["Wfi"]}]}
    with pytest.raises(RtvmAffinityShared):
        build(doc)


def test_identity_mapping_and_boot_info():
    sim = build(three_vms())
    g1 = sim.gear1
    assert g1.translate(1, BASES[1] + 123) == BASES[1] + 123
    info = g1.boot_info[2]
    assert info.memory == [(BASES[2], MIB)] and info.pcpus == [2]
    assert (GICD_BASE, 0x1_0000) in info.mmio_holes


def isolation_fuzz(n: int = 100_000, seed: int = 2024) -> tuple[int, int, int]:
    """Random guest accesses; returns (crossed, hole accesses trapped as MMIO, hole accesses)."""
    sim = build(three_vms())
    g1, machine = sim.gear1, sim.machine
    owned = {v: set(g1.manifests[v].pages()) for v in (1, 2, 3)}
    rng = Prng(seed)
    lo, hi = 0x3FF0_0000, 0x4400_0000
    crossed = hole_ok = hole_total = 0
    for i in range(n):
        vm = 1 + rng.randrange(3)
        pick = rng.randrange(10)
        if pick == 0:
            ipa = HOLES[1 + rng.randrange(3)] + rng.randrange(PAGE_SIZE)
        elif pick == 1:
            ipa = GICD_BASE + rng.randrange(0x1_0000)
        else:
            ipa = lo + rng.randrange(hi - lo)
        in_hole = g1.tables[vm].in_hole(ipa)
        try:
            machine.mem_access(vm, ipa, AccessOp.WRITE if i & 1 else AccessOp.READ, 8, i)
        except Stage2Fault as f:
            if in_hole:
                hole_total += 1
                hole_ok += f.kind is FaultKind.MMIO
            continue
        if in_hole:
            hole_total += 1
        if ipa // PAGE_SIZE not in owned[vm]:
            crossed += 1
    return crossed, hole_ok, hole_total


def test_isolation_fuzz_cross_vm_and_holes():
    """No cross-VM success, every hole access traps."""
    crossed, hole_ok, hole_total = isolation_fuzz()
    assert crossed == 0
    assert hole_total > 0 and hole_ok == hole_total


def _hcall(sim, vm, hid, args):
    return sim.gear1.hypercall(vm, sim.gear1.contexts[(vm, 0)], hid, args)


def share_fuzz(steps: int = 10_000, seed: int = 77) -> int:
    """Random lend/reclaim steps against a dictionary oracle; returns the share count."""
    sim = build(three_vms())
    g1 = sim.gear1
    rng = Prng(seed)
    shared = 0
    oracle = {}  # page -> borrower
    own = {v: g1.manifests[v].pages() for v in (1, 2, 3)}
    for step in range(steps):
        owner = 1 + rng.randrange(3)
        other = 1 + rng.randrange(3)
        base_vm = owner if rng.randrange(4) else other
        page = BASES[base_vm] // PAGE_SIZE + rng.randrange(8)
        n = 1 + rng.randrange(3)
        span = range(page, page + n)
        if rng.randrange(2):
            expect_ok = (other != owner and all(p in own[owner] for p in span)
                         and all(p not in oracle for p in span))
            rc = _hcall(sim, owner, HypercallId.MEM_SHARE, (other, page * PAGE_SIZE, n))
            if expect_ok:
                oracle.update({p: other for p in span})
                shared += 1
        else:
            expect_ok = all(p in own[owner] and p in oracle for p in span)
            rc = _hcall(sim, owner, HypercallId.MEM_RECLAIM, (0, page * PAGE_SIZE, n))
            if expect_ok:
                for p in span:
                    del oracle[p]
        assert rc == (OK if expect_ok else DENIED)
        g1.check_isolation(span)
        if step % 500 == 0:
            g1.check_isolation()
        for p in span:
            for vm in (1, 2, 3):
                allowed = p in own[vm] or oracle.get(p) == vm
                try:
                    g1.translate(vm, p * PAGE_SIZE)
                    reached = True
                except Stage2Fault:
                    reached = False
                assert reached == allowed
    return shared


def test_share_fuzz_keeps_single_owner():
    assert share_fuzz() > 100


class ShareMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.sim = build(three_vms())
        self.g1 = self.sim.gear1

    @rule(owner=st.integers(1, 3), dst=st.integers(1, 3), off=st.integers(0, 3), n=st.integers(1, 2))
    def share(self, owner, dst, off, n):
        _hcall(self.sim, owner, HypercallId.MEM_SHARE, (dst, BASES[owner] + off * PAGE_SIZE, n))

    @rule(owner=st.integers(1, 3), off=st.integers(0, 3), n=st.integers(1, 2))
    def reclaim(self, owner, off, n):
        _hcall(self.sim, owner, HypercallId.MEM_RECLAIM, (0, BASES[owner] + off * PAGE_SIZE, n))

    @invariant()
    def single_owned(self):
        self.g1.check_isolation(range(BASES[1] // PAGE_SIZE, BASES[3] // PAGE_SIZE + 8))
        for vm, table in self.g1.tables.items():
            for page, e in table.entries.items():
                if e.ownership is Ownership.SHARED_FROM:
                    assert self.g1.tables[e.peer].entries[page].ownership is Ownership.LENT


TestShareMachine = ShareMachine.TestCase
TestShareMachine.settings = settings(max_examples=30, stateful_step_count=20, deadline=None)


def test_unknown_hypercall_raises_and_guest_sees_not_supported():
    sim = run(two_secondaries(), 100_000)
    with pytest.raises(UnknownHypercall):
        _hcall(sim, 1, 0x99, ())
    doc = two_secondaries()
    doc["vms"][0]["program"] = ["Hypercall 0x99", "Wfi"]
    sim = run(doc, 100_000)
    assert sim.gear1.contexts[(1, 0)].general_regs[0] == (1 << 64) - 1
    assert any(r.action == "hypercall_rejected" for r in sim.engine.trace)


def test_run_vcpu_is_primary_only():
    sim = run(two_secondaries(), 100_000)
    assert _hcall(sim, 1, HypercallId.RUN_VCPU, (2, 0)) == DENIED


def test_psci_already_on_and_denied():
    sim = run(two_secondaries(), 100_000)
    prim = sim.gear1.primary_ctx(0)
    assert sim.gear1.hypercall(0, prim, HypercallId.PSCI_CPU_ON, (1, None)) == ALREADY_ON_CODE
    assert _hcall(sim, 1, HypercallId.PSCI_CPU_ON, (3, None)) == DENIED


def test_rtvm_broadcast_sgi_is_filtered():
    doc = {"seed": 1, "duration": 2_000_000, "platform": {"pcpus": 4},
           "vms": [{"id": 1, "kind": "rtvm", "affinity": [3],
                    "program": [f"Mmio {GICD_BASE + GICD_SGIR:#x} W blocking {(1 << 24) | 3}", "Wfi"]}]}
    sim = run(doc)
    assert sim.gear1.sgi_filtered == 1
    assert sim.gear1.exits[1] == 1 and sim.gear1.gear2_hops[1] == 0


def test_rtvm_boots_without_gear2():
    doc = {"seed": 1, "duration": 3_000_000, "platform": {"pcpus": 2},
           "vms": [{"id": 1, "kind": "rtvm", "affinity": [1],
                    "program": ["ArmTimer 1000000 periodic", "Wfi", "LoopTo 1 forever"]}]}
    sim = run(doc)
    assert sim.gear1.gear2_hops[1] == 0
    assert sim.guests[(1, 0)].irqs[27] == 2
    with pytest.raises(SimError):
        build({"vms": [{"id": 0, "kind": "primary", "affinity": [0]},
                       {"id": 1, "kind": "primary", "affinity": [1]}]})
