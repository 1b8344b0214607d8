"""Acceptance checks, one PASS/FAIL line per criterion.

Runs under pytest (``pytest tests/test_acceptance.py -s``) or directly
(``python3 tests/test_acceptance.py``).  The heavy runs live here: a
10-virtual-second IoBound overhead run and a 20-seed jitter sweep for both
guest profiles.
"""

from __future__ import annotations

import math
import os
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import build, run  # noqa: E402
from llc_oracle import classify  # noqa: E402
from test_determinism import DOCS, SCEN  # noqa: E402
from test_gear1 import isolation_fuzz, share_fuzz  # noqa: E402
from test_gear2 import ALL_DOCS, _affinity_violations  # noqa: E402
from test_timer_mux import PAIRS, pair_problems  # noqa: E402

from twogear.bench import measure_gear2_overhead, run_microbench  # noqa: E402
from twogear.bench.calibrate import calibrate  # noqa: E402
from twogear.bench.jitter import run_jitter_suite  # noqa: E402
from twogear.devmodel import ApiForwardChannel, IvcMode, simulate_stream  # noqa: E402
from twogear.machine import LlcResult  # noqa: E402
from twogear.scenario import (JITTER_CONFIGS, containment_doc, fairness_doc, from_dict, jitter_doc, load,  # noqa: E402
                              overhead_doc, supervision_doc)
from twogear.simcore import trace_hash  # noqa: E402
from twogear.supervision import Action, Layer  # noqa: E402
from twogear.system import Simulation  # noqa: E402

SEC = 1_000_000_000
MS = 1_000_000
JITTER_SEEDS = range(1, 21)

CRITERIA: list[tuple[int, str, object]] = []


def criterion(number: int, title: str):
    def deco(fn):
        CRITERIA.append((number, title, fn))
        return fn
    return deco


def line(number: int, title: str, ok: bool, detail: str) -> str:
    return f"{'PASS' if ok else 'FAIL'}  {number:2d} {title}: {detail}"


@criterion(1, "io-bound overhead estimate and measurement")
def io_bound_overhead():
    t0 = time.perf_counter()
    rep = measure_gear2_overhead(from_dict(overhead_doc("io_bound", 10 * SEC)))
    wall = time.perf_counter() - t0
    ok = (rep.int_freq == 12346 and abs(rep.estimated - 0.0370) <= 0.0001
          and 0.037 <= rep.measured <= 0.045 and wall < 30)
    return ok, (f"int_freq={rep.int_freq}Hz estimated={rep.estimated:.4%} measured={rep.measured:.4%} "
                f"wall={wall:.1f}s")


@criterion(2, "cpu-bound overhead")
def cpu_bound_overhead():
    rep = measure_gear2_overhead(from_dict(overhead_doc("cpu_bound", 10 * SEC)))
    ok = rep.int_freq == 250 and math.isclose(rep.estimated, 0.00075, abs_tol=1e-15) and rep.measured <= 0.002
    return ok, f"int_freq={rep.int_freq}Hz estimated={rep.estimated:.4%} measured={rep.measured:.4%}"


@criterion(3, "micro-benchmarks and calibration")
def micro_benchmarks():
    got = {n: run_microbench(n).mean_ns for n in ("Hypercall", "VmTrap", "WorldSwitch", "Ipi", "IoOut")}
    cal = calibrate()
    ok = (got["Hypercall"] == 441 and got["VmTrap"] == 732 and got["WorldSwitch"] == 1485
          and abs(got["Ipi"] - 9928) <= 0.05 * 9928 and abs(got["IoOut"] - 8774) <= 0.05 * 8774
          and (cal.virq_inject_ns, cal.gicd_emul_ns, cal.gdm_user_hop_ns) == (441, 7270, 4190))
    detail = " ".join(f"{k}={v:g}" for k, v in got.items())
    return ok, f"{detail} fitted=({cal.virq_inject_ns},{cal.gicd_emul_ns},{cal.gdm_user_hop_ns})"


@criterion(4, "rt vm containment")
def containment():
    parts, ok = [], True
    for k in (0, 1, 4, 16):
        sim = run(containment_doc(k, 1 * SEC))
        exits, hops = sim.gear1.exits.get(1, 0), sim.gear1.gear2_hops.get(1, 0)
        ok &= exits == k and hops == 0
        parts.append(f"k={k}:exits={exits},hops={hops}")
    return ok, " ".join(parts)


@criterion(5, "isolation and share fuzzing")
def isolation():
    crossed, hole_ok, hole_total = isolation_fuzz(100_000)
    try:
        shares = share_fuzz(10_000)
        share_ok, share_detail = True, f"shares={shares}"
    except AssertionError as exc:
        share_ok, share_detail = False, f"share fuzz: {exc}"
    ok = crossed == 0 and hole_total > 0 and hole_ok == hole_total and share_ok
    return ok, f"crossed={crossed} hole_traps={hole_ok}/{hole_total} {share_detail}"


@criterion(6, "timer multiplexing oracle")
def timer_mux():
    bad = [(a, b, p) for a, b in PAIRS for p in [pair_problems(a, b)] if p]
    return not bad, f"{len(PAIRS) - len(bad)}/{len(PAIRS)} interleavings agree" + (f" first={bad[0]}" if bad else "")


def _color_doc(llc, masks, offsets, stride, count):
    vms = []
    for i, (vm, base) in enumerate(((1, 0x5000_0000), (2, 0x5010_0000))):
        prog = [f"MemTouch {base + off * 4096:#x} {stride} {count}" for off in offsets[i]]
        vms.append({"id": vm, "kind": "secondary", "affinity": [vm], "memory": [[base, 1 << 20]],
                    "color_mask": masks[i], "program": prog + ["Compute 10000", "LoopTo 0 forever"]})
    return {"seed": 1, "duration": 2 * MS, "platform": {"pcpus": 3, "llc": llc}, "vms": vms}


@criterion(7, "cache coloring")
def coloring():
    four_colors = {"sets": 256, "ways": 2, "line_bytes": 64}
    disjoint = run(_color_doc(four_colors, (0b0011, 0b1100), ([0, 1], [2, 3]), 16384, 16)).machine.llc.counts
    shared = run(_color_doc(four_colors, (0b0011, 0b0011), ([0, 1], [0, 1]), 16384, 16)).machine.llc.counts
    sim = build(_color_doc({"sets": 2, "ways": 2, "line_bytes": 64}, (None, None), ([0], [0]), 64, 3))
    llc = sim.machine.llc
    llc.log = []
    sim.run()
    expect = classify(llc.log, 2, 2, 64)
    got = tuple(llc.counts[r] for r in (LlcResult.HIT, LlcResult.COLD, LlcResult.CONFLICT_SELF,
                                        LlcResult.CONFLICT_CROSS))
    ok = (disjoint[LlcResult.CONFLICT_CROSS] == 0 and disjoint[LlcResult.CONFLICT_SELF] > 0
          and shared[LlcResult.CONFLICT_CROSS] > 0 and got == expect and got[3] > 0)
    return ok, (f"disjoint cross={disjoint[LlcResult.CONFLICT_CROSS]} (same-color control "
                f"{shared[LlcResult.CONFLICT_CROSS]}), overload cross={got[3]} oracle={expect[3]}")


@criterion(8, "jitter ordering over 20 seeds")
def jitter():
    workers = os.cpu_count() or 1
    ok, parts = True, []
    for profile in ("xenomai", "preempt_rt"):
        reps = run_jitter_suite(JITTER_SEEDS, profile, workers=workers)
        unordered = [r.seed for r in reps if not r.ordered()]
        pt = max(r.normalized("GearvRtVmPassthrough") for r in reps)
        ratio = min(r.normalized("GearvNonRtVm") / r.normalized("GearvRtVmPassthrough") for r in reps)
        ok &= not unordered and pt <= 1.2 and ratio >= 50 and len(reps) == len(JITTER_SEEDS)
        parts.append(f"{profile}: unordered={unordered} passthrough_max={pt:.3f} nonrt/passthrough_min={ratio:.1f}")
    return ok, "; ".join(parts)


@criterion(9, "scheduler fairness and affinity")
def fairness():
    sim = run(fairness_doc(threads=3, quanta=300))
    counts = sorted(t.dispatches for t in sim.gear2.threads.values())
    violations = sum(_affinity_violations(run(doc)) for _, doc in ALL_DOCS)
    ok = len(counts) == 3 and all(abs(c - 100) <= 1 for c in counts) and violations == 0
    return ok, f"quanta={counts} affinity_violations={violations} over {len(ALL_DOCS)} scenarios"


@criterion(10, "shared-memory ivc beats copy")
def ivc():
    costs = [1e-6, 1e-3, 0.01, 0.1, 0.25, 1.0, 10.0, 1000.0]
    closed = all(ApiForwardChannel(IvcMode.SHARED_MEM, per_byte_copy_ns=c).throughput(4096)
                 > ApiForwardChannel(IvcMode.COPY, per_byte_copy_ns=c).throughput(4096) for c in costs)
    shm = simulate_stream(ApiForwardChannel(IvcMode.SHARED_MEM), 4096, 200)
    copy = simulate_stream(ApiForwardChannel(IvcMode.COPY), 4096, 200)
    return closed and shm > copy, f"closed_form={closed} simulated shm={shm / 1e6:.1f}MB/s copy={copy / 1e6:.1f}MB/s"


@criterion(11, "layered supervision")
def supervision():
    vm = run(supervision_doc("vm", at=3 * SEC, duration=10 * SEC)).supervisor.events
    vm_first = next((e for e in vm if e.layer is Layer.L2), None)
    vm_ok = (vm_first is not None and vm_first.subject == "vm1" and vm_first.action is Action.RESTART_VM
             and vm_first.at - 3 * SEC <= 2 * 250 * MS)
    g2 = run(supervision_doc("gear2", at=3 * SEC, duration=10 * SEC, restart=False)).supervisor.events
    l3 = next((e for e in g2 if e.layer is Layer.L3), None)
    g2_ok = (l3 is not None and l3.at - 3 * SEC <= 2 * 500 * MS
             and not [e for e in g2 if e.layer is Layer.L2])
    healthy = run(supervision_doc(None, duration=10 * SEC)).supervisor.events
    ok = vm_ok and g2_ok and not healthy
    return ok, (f"vm stall detected +{(vm_first.at - 3 * SEC) // MS if vm_first else None}ms, "
                f"gear2 stall detected by L3 +{(l3.at - 3 * SEC) // MS if l3 else None}ms, "
                f"healthy events={len(healthy)}")


@criterion(12, "determinism")
def determinism():
    def twice(make):
        return trace_hash(make().run()) == trace_hash(make().run())

    same = [name for name, doc in DOCS if not twice(lambda d=doc: build(d))]

    def shipped(path):
        sc = load(str(path))
        sc.duration = min(sc.duration, 200 * MS)
        return Simulation(sc)

    same += [p.stem for p in SCEN if not twice(lambda p=p: shipped(p))]
    differ = [c for c in JITTER_CONFIGS
              if trace_hash(build(jitter_doc(c, seed=1, duration=50 * MS)).run())
              == trace_hash(build(jitter_doc(c, seed=2, duration=50 * MS)).run())]
    total = len(DOCS) + len(SCEN)
    return not same and not differ, (f"{total - len(same)}/{total} scenarios repeat, "
                                     f"seed-insensitive jitter configs={differ}")


@pytest.mark.parametrize("number,title,fn", CRITERIA, ids=[f"{n:02d}" for n, _, _ in CRITERIA])
def test_criterion(number, title, fn, capsys):
    ok, detail = fn()
    with capsys.disabled():
        print("\n" + line(number, title, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for number, title, fn in CRITERIA:
        ok, detail = fn()
        failed += not ok
        print(line(number, title, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
