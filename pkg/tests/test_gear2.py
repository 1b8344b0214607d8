import pytest

from twogear.gear2 import RoundRobin, StrictPriority, Thread, ThreadKind
from twogear.scenario import (JITTER_CONFIGS, containment_doc, fairness_doc, jitter_doc, micro_doc, overhead_doc,
                              supervision_doc)

from conftest import build, run


def _t(n, prio=0):
    return Thread(ThreadKind.VCPU, 0, n, 0, priority=prio)


def test_round_robin_fifo():
    rr = RoundRobin()
    a, b, c = _t(1), _t(2), _t(3)
    for t in (a, b, c, a):
        rr.on_ready(t)
    assert [rr.pick_next() for _ in range(3)] == [a, b, c]
    assert rr.pick_next() is None


def test_strict_priority_then_fifo():
    sp = StrictPriority()
    lo, hi1, hi2 = _t(1, 1), _t(2, 5), _t(3, 5)
    for t in (lo, hi1, hi2):
        sp.on_ready(t)
    sp.on_block(hi1)
    assert [sp.pick_next() for _ in range(2)] == [hi2, lo]


def test_fairness_three_threads_one_pcpu():
    sim = run(fairness_doc(threads=3, quanta=300))
    counts = [t.dispatches for t in sim.gear2.threads.values()]
    assert len(counts) == 3 and all(abs(c - 100) <= 1 for c in counts)


def test_strict_priority_runs_highest_first():
    doc = fairness_doc(threads=3, quanta=30)
    doc["scheduler"]["policy"] = "strict_priority"
    sim = build(doc)
    sim.run(1)
    for vm, prio in ((1, 1), (2, 7), (3, 4)):
        sim.gear2.threads[(vm, 0)].priority = prio
    sim.run()
    counts = {vm: sim.gear2.threads[(vm, 0)].dispatches for vm in (1, 2, 3)}
    # the compute-bound top thread never yields to lower levels
    assert counts[2] >= 29 and counts[3] <= 1 and counts[1] <= 1


def _affinity_violations(sim) -> int:
    bad = 0
    for r in sim.engine.trace:
        if r.action == "dispatch":
            if sim.gear1.manifests[r.get("vm")].affinity[r.get("vcpu")] != r.get("pcpu"):
                bad += 1
        elif r.action == "hypercall" and r.actor == "gear2":
            if sim.gear1.manifests[r.get("vm")].affinity[r.get("vcpu")] != r.get("pcpu"):
                bad += 1
    return bad


ALL_DOCS = ([("fairness", fairness_doc(quanta=30)), ("containment", containment_doc(3, 50_000_000)),
             ("supervision", supervision_doc("vm", at=100_000_000, duration=600_000_000)),
             ("io", overhead_doc("io_bound", 50_000_000)), ("cpu", overhead_doc("cpu_bound", 50_000_000))]
            + [(f"micro-{n}", micro_doc(n, 10)) for n in ("Hypercall", "VmTrap", "Ipi", "IoOut")]
            + [(f"jitter-{c}", jitter_doc(c, duration=50_000_000)) for c in JITTER_CONFIGS])


@pytest.mark.parametrize("name,doc", ALL_DOCS, ids=[n for n, _ in ALL_DOCS])
def test_no_affinity_violations(name, doc):
    sim = run(doc)
    assert _affinity_violations(sim) == 0
    # every vcpu context switched in on a pcpu only ever lives on its home pcpu
    for ex in sim.execs:
        g = ex.guest
        if g is not None:
            assert sim.gear1.manifests[g.ctx.vm].affinity[g.ctx.vcpu] == ex.id


def test_run_vcpu_refuses_foreign_pcpu():
    from twogear.errors import SimError
    sim = run(fairness_doc(quanta=2))
    with pytest.raises(SimError):
        sim.gear1.run_vcpu(0, sim.gear1.contexts[(1, 0)])
