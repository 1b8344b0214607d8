from hypothesis import given, settings, strategies as st
import pytest

from twogear.errors import UnknownWatchdog
from twogear.scenario import supervision_doc
from twogear.simcore import Engine
from twogear.supervision import MS, Action, Layer, SupervisionConfig, Supervisor

from conftest import run

SEC = 1000 * MS


def first_detection(kicks: list[int], period: int, start: int = 0, horizon: int = 10 * SEC):
    """Earliest check point (multiples of period) where the watchdog is stale."""
    t = start + period
    while t <= horizon:
        last = max([k for k in kicks if k <= t], default=start)
        if t - last > period:
            return t
        t += period
    return None


def toy(kick_times: dict, alive=None, actions=None, horizon=10 * SEC):
    eng = Engine()
    cfg = SupervisionConfig()
    if actions:
        cfg.actions.update(actions)
    sup = Supervisor(eng, cfg, alive=alive)
    for (layer, subject), times in kick_times.items():
        sup.register(layer, subject)
        for t in times:
            eng.call_at(t, lambda ev, l=layer, s=subject: sup.kick(l, s))
    sup.start()
    eng.run_until(horizon)
    return sup


def test_unknown_watchdog():
    sup = Supervisor(Engine())
    with pytest.raises(UnknownWatchdog):
        sup.kick(Layer.L2, "vm9")


def test_healthy_is_empty():
    period = 250 * MS
    sup = toy({(Layer.L2, "vm1"): range(period // 2, 10 * SEC, period // 2)})
    assert sup.events == [] and sup.check_all() == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 5 * SEC), max_size=40), st.sampled_from(list(Layer)))
def test_detection_matches_oracle(kicks, layer):
    period = SupervisionConfig().periods[layer]
    sup = toy({(layer, "x"): sorted(kicks)}, horizon=6 * SEC)
    got = [e.at for e in sup.events]
    expect = first_detection(sorted(kicks), period, horizon=6 * SEC)
    assert (got[0] if got else None) == expect
    for at in got:
        last = max([k for k in kicks if k <= at], default=0)
        assert at - last > period


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 249 * MS))
def test_no_false_positives_and_bounded_latency(stall_after, jitter):
    period = 250 * MS
    kicks = [jitter + i * (period - 1) for i in range(stall_after)]
    sup = toy({(Layer.L2, "vm1"): kicks}, horizon=12 * SEC)
    assert sup.events
    stall = kicks[-1]
    first = sup.events[0].at
    assert first > stall + period
    assert first - stall <= 2 * period  # one period plus one check interval


def test_single_stalled_vm_gives_one_restart():
    period = 250 * MS
    sup = toy({(Layer.L2, "vm1"): range(100 * MS, 10 * SEC, period // 2),
               (Layer.L2, "vm2"): [100 * MS]},
              actions={Layer.L2: Action.RESTART_VM}, horizon=600 * MS)
    assert [(e.layer, e.subject, e.action) for e in sup.events] == [(Layer.L2, "vm2", Action.RESTART_VM)]


def test_repeated_l2_failures_escalate():
    sup = toy({(Layer.L2, "vm1"): [10 * MS]}, horizon=1100 * MS)
    # checks at 250, 500, 750, 1000 ms: stale from the second check on, third failure escalates
    assert [(e.at, e.layer, e.subject) for e in sup.events] == [
        (500 * MS, Layer.L2, "vm1"), (750 * MS, Layer.L2, "vm1"), (1000 * MS, Layer.L2, "vm1"),
        (1000 * MS, Layer.L3, "escalated")]


def test_three_layer_toy_dead_gear2():
    """Gear2 dies at 1 s: its kicks stop and so do the L2 checks it runs."""
    death = 1 * SEC
    state = {"gear2": True}
    eng_kicks = list(range(125 * MS, death, 250 * MS))
    eng = Engine()
    sup = Supervisor(eng, alive={"gear2": lambda: state["gear2"]})
    sup.register(Layer.L2, "vm1")
    sup.register(Layer.L3, "gear2")
    sup.register(Layer.L4, "soc")
    for t in eng_kicks:
        for lay, sub in ((Layer.L2, "vm1"), (Layer.L3, "gear2"), (Layer.L4, "soc")):
            eng.call_at(t, lambda ev, l=lay, s=sub: sup.kick(l, s))
    eng.call_at(death, lambda ev: state.update(gear2=False))
    sup.start()
    eng.run_until(3 * SEC)
    l3 = first_detection(eng_kicks, 500 * MS, horizon=3 * SEC)
    l4 = first_detection(eng_kicks, 1000 * MS, horizon=3 * SEC)
    assert (l3, l4) == (1500 * MS, 2000 * MS)
    assert not [e for e in sup.events if e.layer is Layer.L2]
    first = {}
    for e in sup.events:
        first.setdefault(e.layer, e)
    assert first[Layer.L3].at == l3 and first[Layer.L3].subject == "gear2"
    assert first[Layer.L4].at == l4 and first[Layer.L4].action is Action.LOG_ONLY
    assert sup.checks[Layer.L2] == 3


def test_simulated_vm_stall_restarts_vm():
    sim = run(supervision_doc("vm", at=500 * MS, duration=2 * SEC))
    ev = [e for e in sim.supervisor.events]
    assert ev and ev[0].layer is Layer.L2 and ev[0].subject == "vm1" and ev[0].action is Action.RESTART_VM
    assert ev[0].at - 500 * MS <= 2 * 250 * MS
    assert all(e.subject != "vm2" for e in ev)
    # the restarted VM kicks again: no repeat detection
    assert len([e for e in ev if e.subject == "vm1"]) == 1


def test_simulated_gear2_stall_detected_by_l3():
    sim = run(supervision_doc("gear2", at=500 * MS, duration=3 * SEC, restart=False))
    ev = sim.supervisor.events
    assert not [e for e in ev if e.layer is Layer.L2]
    l3 = [e for e in ev if e.layer is Layer.L3]
    l4 = [e for e in ev if e.layer is Layer.L4]
    assert l3 and l3[0].at - 500 * MS <= 2 * 500 * MS
    assert l4 and l4[0].action is Action.LOG_ONLY and l4[0].at > l3[0].at


def test_simulated_gear2_restart():
    sim = run(supervision_doc("gear2", at=500 * MS, duration=3 * SEC))
    l3 = [e for e in sim.supervisor.events if e.layer is Layer.L3]
    assert len(l3) == 1 and l3[0].action is Action.RESTART_GEAR2
    assert sim.gear2.alive


def test_simulated_healthy_run():
    sim = run(supervision_doc(None, duration=3 * SEC))
    assert sim.supervisor.events == []
    assert sim.supervisor.checks[Layer.L2] == 12
