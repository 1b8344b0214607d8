"""Benchmarks, overhead estimation, jitter experiments and reports."""

from twogear.bench.jitter import JitterEntry, JitterReport, run_jitter, run_jitter_suite
from twogear.bench.micro import MICROBENCHES, MicroResult, run_microbench
from twogear.bench.overhead import (OverheadReport, estimate_gear2_overhead,
                                    measure_gear2_overhead, overhead_from_trace)

__all__ = [
    "JitterEntry", "JitterReport", "run_jitter", "run_jitter_suite",
    "MICROBENCHES", "MicroResult", "run_microbench",
    "OverheadReport", "estimate_gear2_overhead", "measure_gear2_overhead", "overhead_from_trace",
]
