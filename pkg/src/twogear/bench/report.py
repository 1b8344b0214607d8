"""CSV and JSON emission.  Floats are always written with six decimals."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, is_dataclass
from typing import Any, Iterable, Sequence


def fmt(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def _plain(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        value = asdict(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and not isinstance(value, (int, float, str)):
        return value.value
    return value


def to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


_FIXED = re.compile(r'"@fixed:([-0-9.]+)@"')


def _floats_fixed(value: Any) -> Any:
    if isinstance(value, float):
        return f"@fixed:{value:.6f}@"
    if isinstance(value, dict):
        return {k: _floats_fixed(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_floats_fixed(v) for v in value]
    return value


def to_json(payload: Any) -> str:
    text = json.dumps(_floats_fixed(_plain(payload)), indent=2, sort_keys=True)
    return _FIXED.sub(r"\1", text) + "\n"


def render(rows: Iterable[dict], fmt_name: str = "csv") -> str:
    rows = [_plain(r) for r in rows]
    if fmt_name == "json":
        return to_json(rows)
    if fmt_name == "csv":
        return to_csv(rows)
    raise ValueError(f"unknown format {fmt_name!r}")


def overhead_row(name: str, rep) -> dict:
    return {"scenario": name, "int_freq": rep.int_freq, "ws_cost_s": rep.ws_cost,
            "estimated": rep.estimated, "measured": rep.measured, "interrupts": rep.interrupts,
            "world_switches": rep.world_switches, "ws_per_irq": rep.ws_per_irq,
            "charged_ns": rep.charged_ns, "window_ns": rep.window_ns}


def jitter_rows(reports) -> list[dict]:
    rows = []
    for rep in reports:
        for cfg, e in rep.entries.items():
            s = e.stats
            rows.append({"seed": rep.seed, "profile": rep.profile, "config": cfg, "count": s.count,
                         "min_ns": s.min, "avg_ns": float(s.avg), "max_ns": s.max,
                         "normalized_jitter": float(s.normalized_jitter), "vm_exits": e.vm_exits,
                         "gicd_accesses": e.gicd_accesses, "gear2_hops": e.gear2_hops,
                         "trace_hash": e.trace_hash})
    return rows


def micro_rows(results) -> list[dict]:
    return [{"bench": r.name, "mean_ns": float(r.mean_ns), "count": r.count} for r in results]
