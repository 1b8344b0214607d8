"""Cyclictest-style latency runs over the five platform configurations.

Each configuration runs the same periodic-timer task in VM 1 with a disk
writing background in the DVM.  Latency samples come from the task's
``rt_sample`` trace records, so every statistic can be recomputed from a
dumped trace.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional

from twogear.guests import LatencyStats
from twogear.scenario import JITTER_CONFIGS, from_dict, jitter_doc
from twogear.simcore import Trace, trace_hash
from twogear.system import Simulation

RT_VM = 1
ORDER = ("Native", "GearvRtVmPassthrough", "GearvRtVmVgicEmul", "KvmLikeRtVm", "GearvNonRtVm")


@dataclass
class JitterEntry:
    config: str
    seed: int
    profile: str
    stats: LatencyStats
    vm_exits: int
    gicd_accesses: int
    gear2_hops: int
    trace_hash: str


@dataclass
class JitterReport:
    seed: int
    profile: str
    entries: dict[str, JitterEntry] = field(default_factory=dict)

    @property
    def native_max(self) -> int:
        return self.entries["Native"].stats.max

    def normalized(self, config: str) -> float:
        nat = self.native_max
        return self.entries[config].stats.max / nat if nat else 0.0

    def orderings(self) -> dict[str, bool]:
        m = {c: e.stats.max for c, e in self.entries.items()}
        return {
            "native<=passthrough": m["Native"] <= m["GearvRtVmPassthrough"],
            "passthrough<vgic_emul": m["GearvRtVmPassthrough"] < m["GearvRtVmVgicEmul"],
            "vgic_emul<kvm_like": m["GearvRtVmVgicEmul"] < m["KvmLikeRtVm"],
            "kvm_like<non_rt": m["KvmLikeRtVm"] < m["GearvNonRtVm"],
        }

    def ordered(self) -> bool:
        return all(self.orderings().values())


def samples_from_trace(trace: Trace, vm: int = RT_VM) -> list[int]:
    actor = f"vm{vm}.0"
    return [r.get("latency") for r in trace if r.action == "rt_sample" and r.actor == actor]


def run_jitter(config: str, duration: int = 1_000_000_000, seed: int = 1,
               profile: str = "xenomai", native_max: Optional[int] = None) -> JitterEntry:
    if config not in JITTER_CONFIGS:
        raise ValueError(f"unknown jitter config {config!r}")
    sim = Simulation(from_dict(jitter_doc(config, profile, seed, duration)))
    trace = sim.run()
    samples = samples_from_trace(trace)
    gicd = sum(1 for r in trace if r.action == "vm_trap" and r.get("vm") == RT_VM
               and r.get("reason") == "gicd_access")
    return JitterEntry(config, seed, profile, LatencyStats.from_samples(samples, native_max),
                       sim.gear1.exits.get(RT_VM, 0), gicd, sim.gear1.gear2_hops.get(RT_VM, 0),
                       trace_hash(trace))


def _one_seed(args) -> JitterReport:
    seed, profile, duration, configs = args
    rep = JitterReport(seed, profile)
    for cfg in configs:
        rep.entries[cfg] = run_jitter(cfg, duration, seed, profile)
    nat = rep.entries["Native"].stats.max if "Native" in rep.entries else None
    if nat:
        for e in rep.entries.values():
            e.stats = e.stats.normalized(nat)
    return rep


def run_jitter_suite(seeds: Iterable[int], profile: str = "xenomai", duration: int = 1_000_000_000,
                     configs: Iterable[str] = ORDER, workers: int = 1) -> list[JitterReport]:
    """One report per seed, sorted by seed whatever order the workers finish in."""
    jobs = [(s, profile, duration, tuple(configs)) for s in sorted(set(seeds))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_one_seed, jobs))
    else:
        reports = [_one_seed(j) for j in jobs]
    return sorted(reports, key=lambda r: r.seed)
