"""Command line entry point.

    twogear sim run      [--config F] [--seed N] [--duration NS] [--out DIR]
    twogear bench micro  [--name NAME ...] [--iterations N]
    twogear bench overhead --config F
    twogear bench jitter [--seeds N] [--profile xenomai|preempt_rt] [--workers N]
    twogear report emit  [--out DIR]
    twogear trace dump   [--config F]

Common flags: --config, --seed, --duration, --out, --format csv|json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from twogear.bench import (MICROBENCHES, measure_gear2_overhead, run_jitter_suite, run_microbench)
from twogear.bench.jitter import ORDER
from twogear.bench.report import jitter_rows, micro_rows, overhead_row, render, to_json
from twogear.errors import ScenarioError, SimError
from twogear.scenario import Scenario, from_dict, load, overhead_doc
from twogear.simcore import trace_hash


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario JSON file")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--duration", type=int, help="virtual nanoseconds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twogear", description="two-gear hypervisor simulator")
    top = ap.add_subparsers(dest="group", required=True)

    sim = top.add_parser("sim").add_subparsers(dest="cmd", required=True)
    _common(sim.add_parser("run", help="run a scenario and write its trace"))

    bench = top.add_parser("bench").add_subparsers(dest="cmd", required=True)
    micro = bench.add_parser("micro", help="per-operation costs")
    _common(micro)
    micro.add_argument("--name", action="append", choices=MICROBENCHES)
    micro.add_argument("--iterations", type=int, default=200)
    _common(bench.add_parser("overhead", help="interrupt forwarding overhead"))
    jit = bench.add_parser("jitter", help="scheduling latency across configurations")
    _common(jit)
    jit.add_argument("--seeds", type=int, default=20)
    jit.add_argument("--profile", choices=("xenomai", "preempt_rt"), default="xenomai")
    jit.add_argument("--workers", type=int, default=1)

    report = top.add_parser("report").add_subparsers(dest="cmd", required=True)
    emit = report.add_parser("emit", help="run every bench and write all reports")
    _common(emit)
    emit.add_argument("--seeds", type=int, default=20)

    trace = top.add_parser("trace").add_subparsers(dest="cmd", required=True)
    _common(trace.add_parser("dump", help="print the canonical trace"))
    return ap


def _scenario(args, default: Optional[dict] = None) -> Scenario:
    if args.config:
        sc = load(args.config)
    else:
        sc = from_dict(default or overhead_doc("io_bound", 1_000_000_000))
    if args.seed is not None:
        sc.seed = args.seed
    if args.duration is not None:
        sc.duration = args.duration
    return sc


def _write(args, name: str, text: str) -> None:
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        print(f"wrote {path}")
    else:
        sys.stdout.write(text)


def cmd_sim_run(args) -> int:
    from twogear.system import Simulation

    sc = _scenario(args)
    sim = Simulation(sc)
    trace = sim.run()
    sim.devmodel.store.flush()
    digest = trace_hash(trace)
    summary = {"scenario": sc.name, "seed": sc.seed, "duration": sc.duration, "records": len(trace),
               "trace_hash": digest, "vm_exits": dict(sorted(sim.gear1.exits.items())),
               "supervision_events": [[e.at, e.layer.value, e.subject, e.action.value]
                                      for e in sim.supervisor.events]}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        trace.dump(os.path.join(args.out, "trace.tsv"))
        _write(args, "summary.json", to_json(summary))
    print(f"trace_hash {digest}")
    return 0


def cmd_bench_micro(args) -> int:
    names = args.name or list(MICROBENCHES)
    results = [run_microbench(n, args.iterations, args.seed or 1) for n in names]
    _write(args, f"micro.{args.format}", render(micro_rows(results), args.format))
    return 0


def cmd_bench_overhead(args) -> int:
    sc = _scenario(args, overhead_doc("io_bound", 10_000_000_000))
    rep = measure_gear2_overhead(sc)
    _write(args, f"overhead.{args.format}", render([overhead_row(sc.name, rep)], args.format))
    return 0


def cmd_bench_jitter(args) -> int:
    duration = args.duration or 1_000_000_000
    first = args.seed or 1
    reports = run_jitter_suite(range(first, first + args.seeds), args.profile, duration, ORDER, args.workers)
    _write(args, f"jitter.{args.format}", render(jitter_rows(reports), args.format))
    bad = [r.seed for r in reports if not r.ordered()]
    if bad:
        print(f"ordering violated for seeds {bad}", file=sys.stderr)
    return 0


def cmd_report_emit(args) -> int:
    out = args.out or "reports"
    args.out = out
    results = [run_microbench(n, 200) for n in MICROBENCHES]
    _write(args, f"micro.{args.format}", render(micro_rows(results), args.format))
    duration = args.duration or 10_000_000_000
    rows = [overhead_row(k, measure_gear2_overhead(from_dict(overhead_doc(k, duration))))
            for k in ("io_bound", "cpu_bound")]
    _write(args, f"overhead.{args.format}", render(rows, args.format))
    reps = []
    for prof in ("xenomai", "preempt_rt"):
        reps += run_jitter_suite(range(1, args.seeds + 1), prof)
    _write(args, f"jitter.{args.format}", render(jitter_rows(reps), args.format))
    return 0


def cmd_trace_dump(args) -> int:
    from twogear.system import Simulation

    trace = Simulation(_scenario(args)).run()
    _write(args, "trace.tsv", "".join(trace.lines()))
    return 0


COMMANDS = {
    ("sim", "run"): cmd_sim_run,
    ("bench", "micro"): cmd_bench_micro,
    ("bench", "overhead"): cmd_bench_overhead,
    ("bench", "jitter"): cmd_bench_jitter,
    ("report", "emit"): cmd_report_emit,
    ("trace", "dump"): cmd_trace_dump,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[(args.group, args.cmd)](args)
    except (ScenarioError, json.JSONDecodeError) as exc:
        print(f"twogear: invalid scenario: {exc}", file=sys.stderr)
        return 1
    except (SimError, OSError) as exc:
        print(f"twogear: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
