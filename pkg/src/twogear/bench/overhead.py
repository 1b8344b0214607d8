"""Interrupt-forwarding overhead: closed-form estimate and trace measurement.

The estimate counts two world switches per forwarded interrupt.  The
measurement sums every charge that exists only because Gear2 sits on the
interrupt path (world switches caused by the interrupt plus Gear2's
injection), over a window of ``duration`` starting at the measured vcpu's
first entry, and divides by the window length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from twogear.gear1 import SGI_GEAR1_RELOAD, SGI_GEAR2_KICK
from twogear.machine import PPI_EL1_PHYS_TIMER, PPI_EL2_PHYS_TIMER
from twogear.simcore import Trace

# world-switch time as quoted for the estimate (1485 ns rounded to 1.5 us)
WS_COST_S = 1.5e-6
HYPERVISOR_LINES = frozenset({SGI_GEAR2_KICK, SGI_GEAR1_RELOAD, PPI_EL2_PHYS_TIMER, PPI_EL1_PHYS_TIMER})


def estimate_gear2_overhead(int_freq: float, ws_cost: float) -> float:
    """Fraction of CPU time: ``int_freq * ws_cost * 2``."""
    if int_freq < 0 or ws_cost < 0:
        raise ValueError("inputs must be non-negative")
    return int_freq * ws_cost * 2


@dataclass(frozen=True)
class OverheadReport:
    int_freq: int            # interrupts per second, rounded to whole Hz
    ws_cost: float           # seconds
    estimated: float
    measured: float
    window_ns: int
    interrupts: int
    world_switches: int
    charged_ns: int

    @property
    def ws_per_irq(self) -> float:
        return self.world_switches / self.interrupts if self.interrupts else 0.0


def first_entry(trace: Trace, vm: int) -> Optional[int]:
    prefix = f"vm{vm}."
    for r in trace:
        if r.action == "world_switch" and str(r.get("to", "")).startswith(prefix):
            return r.at
    return None


def overhead_from_trace(trace: Trace, vm: int, duration: int, ws_cost: float = WS_COST_S) -> OverheadReport:
    start = first_entry(trace, vm)
    if start is None or duration <= 0:
        return OverheadReport(0, ws_cost, 0.0, 0.0, duration, 0, 0, 0)
    end = start + duration
    prefix = f"vm{vm}."
    irqs = switches = charged = 0
    for r in trace:
        if r.at < start:
            continue
        if r.at > end:
            break
        action = r.action
        if action == "vm_trap":
            if r.get("vm") == vm and r.get("reason") == "phys_irq" and r.get("line") not in HYPERVISOR_LINES:
                irqs += 1
        elif action == "world_switch":
            if r.get("cause") == "irq" and (str(r.get("from")).startswith(prefix)
                                            or str(r.get("to")).startswith(prefix)):
                switches += 1
                charged += r.cost
        elif action == "virq_inject":
            if r.actor == "gear2" and r.get("cause") == "irq" and r.get("vm") == vm:
                charged += r.cost
    seconds = duration / 1e9
    freq = round(irqs / seconds)
    return OverheadReport(freq, ws_cost, estimate_gear2_overhead(freq, ws_cost), charged / duration,
                          duration, irqs, switches, charged)


def measure_gear2_overhead(scenario, vm: Optional[int] = None, ws_cost: float = WS_COST_S) -> OverheadReport:
    """Run ``scenario`` for its duration (after the vcpu's first entry) and measure."""
    from twogear.system import Simulation

    if vm is None:
        vm = scenario.bench.get("measured_vm")
    if vm is None:
        vm = next(s.manifest.vm_id for s in scenario.vms if s.manifest.kind.value != "primary")
    sim = Simulation(scenario)
    # the boot prefix is short; run until the entry is known, then the full window
    sim.run(min(scenario.duration, 10_000_000))
    start = first_entry(sim.engine.trace, vm) or 0
    sim.run(start + scenario.duration)
    return overhead_from_trace(sim.engine.trace, vm, scenario.duration, ws_cost)
