"""Named nanosecond charges for hypervisor transitions.

The three primitive defaults are the measured values of the reference
board.  ``virq_inject_ns``, ``gicd_emul_ns`` and ``gdm_user_hop_ns`` are not
measured there; their defaults are fitted by ``twogear.bench.calibrate`` so
that the composed IPI and I/O-out paths reproduce the published composites
(9928 ns and 8774 ns).  Re-run the calibration after changing the flows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class CostModel:
    hypercall_ns: int = 441
    vm_trap_ns: int = 732
    world_switch_ns: int = 1485
    # fitted, see twogear.bench.calibrate
    virq_inject_ns: int = 441
    gicd_emul_ns: int = 7270
    gdm_user_hop_ns: int = 4190
    # not measured; EL3 firmware round trip for CPU_ON
    el3_hop_ns: int = 2000
    per_byte_copy_ns: float = 0.25

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def with_overrides(self, overrides: dict | None) -> "CostModel":
        if not overrides:
            return self
        known = {f.name for f in fields(self)}
        bad = set(overrides) - known
        if bad:
            raise KeyError(f"unknown cost model keys: {sorted(bad)}")
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_COSTS = CostModel()

# Monolithic baseline column.  The world-switch entry is the half-hypercall
# estimate printed alongside the measured hypercall figure.
KVM_COSTS = CostModel(hypercall_ns=3458, vm_trap_ns=4366, world_switch_ns=1729)

PROVENANCE = {
    "hypercall_ns": "measured primitive (441 ns)",
    "vm_trap_ns": "measured primitive (732 ns)",
    "world_switch_ns": "measured primitive (1485 ns)",
    "virq_inject_ns": "prior: Gear1-resolved hypercall cost",
    "gicd_emul_ns": "fitted to IPI composite 9928 ns",
    "gdm_user_hop_ns": "fitted to I/O-out composite 8774 ns",
    "el3_hop_ns": "assumed",
    "per_byte_copy_ns": "assumed",
}
