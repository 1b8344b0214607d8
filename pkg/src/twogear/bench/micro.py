"""Micro-benchmarks read back from the trace.

Primitive benchmarks report the mean charge of their record kind issued for
the measured guest.  Composite ones (Ipi, IoOut) report the mean virtual
time from the guest's issuing access to the end of the path; the first
iteration is a warm-up because the peer vcpu may still be booting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import fmean
from typing import Optional

from twogear.costs import CostModel
from twogear.scenario import from_dict, micro_doc
from twogear.simcore import Trace
from twogear.system import Simulation

MICROBENCHES = ("Hypercall", "WorldSwitch", "VmTrap", "Ipi", "IoOut")
MEASURED_VM = 1


@dataclass
class MicroResult:
    name: str
    mean_ns: float
    samples: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.samples)


def _charges(trace: Trace, action: str, pred) -> list[int]:
    return [r.cost for r in trace if r.action == action and pred(r)]


def _spans(trace: Trace, start_actor: str, end) -> list[int]:
    """Time from each ``mmio_issue`` of ``start_actor`` to the next record matching ``end``."""
    out = []
    t0: Optional[int] = None
    for r in trace:
        if r.actor == start_actor and r.action == "mmio_issue":
            t0 = r.at
        elif t0 is not None and end(r):
            out.append(r.at - t0)
            t0 = None
    return out[1:]


def samples_from_trace(name: str, trace: Trace, vm: int = MEASURED_VM) -> list[int]:
    me = f"vm{vm}.0"
    if name == "Hypercall":
        return _charges(trace, "hypercall", lambda r: r.actor == "gear1" and r.get("vm") == vm)
    if name == "VmTrap":
        return _charges(trace, "vm_trap", lambda r: r.get("vm") == vm)
    if name == "WorldSwitch":
        return _charges(trace, "world_switch", lambda r: me in (r.get("from"), r.get("to")))
    if name == "Ipi":
        return _spans(trace, me, lambda r: r.actor == f"vm{vm}.1" and r.action == "virq_handled")
    if name == "IoOut":
        return _spans(trace, me, lambda r: r.action == "io_ack" and r.get("vm") == vm)
    raise ValueError(f"unknown micro-benchmark {name!r}")


def run_microbench(name: str, iterations: int = 200, seed: int = 1,
                   costs: Optional[CostModel | dict] = None) -> MicroResult:
    """Mean charged nanoseconds per operation for ``name``."""
    doc = micro_doc(name, iterations, seed)
    if costs is not None:
        doc["cost_model"] = costs.to_dict() if isinstance(costs, CostModel) else dict(costs)
    sim = Simulation(from_dict(doc))
    trace = sim.run()
    samples = samples_from_trace(name, trace)
    if not samples:
        raise RuntimeError(f"{name}: no samples in trace")
    return MicroResult(name, fmean(samples), samples)
