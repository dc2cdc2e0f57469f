"""Reports: a plain container plus table and JSON renderings.

JSON layout (keys always emitted in this order)::

    {"name": str, "seed": int,
     "breakdown": [{"step": int, "label": str, "count": int, "total_ns": int,
                    "mean_ns": int}, ...],
     "breakdown_total_ns": int,            # sum of the mean_ns column
     "workflow": {"completed": int, "conforming": int, "incomplete": int},
     "counters": {str: int},
     "verdicts": {attack: {"expected": str, "observed": str, "holds": bool,
                           "detections": [str], "latency_samples": int | null}},
     "series": {str: [[x, y], ...]},
     "tables": {str: {"columns": [str], "rows": [[...]]}},
     "invariants": {str: {"ok": bool, "detail": str}},
     "errors": [str],
     "event_log_digest": str}

Times are modeled virtual nanoseconds, not measurements.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

FIELDS = ("name", "seed", "breakdown", "breakdown_total_ns", "workflow", "counters",
          "verdicts", "series", "tables", "invariants", "errors", "event_log_digest")


@dataclass
class Report:
    name: str = ""
    seed: int = 0
    breakdown: list = field(default_factory=list)
    workflow: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    event_log_digest: str = ""

    @property
    def breakdown_total_ns(self) -> int:
        return sum(row["mean_ns"] for row in self.breakdown)

    @property
    def ok(self) -> bool:
        """Every expected outcome held and every invariant was kept."""
        return (all(v["holds"] for v in self.verdicts.values())
                and all(i["ok"] for i in self.invariants.values()))

    def to_dict(self) -> dict:
        out = {}
        for name in FIELDS:
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Report":
        data = dict(data)
        data.pop("breakdown_total_ns", None)
        series = {k: [list(p) for p in v] for k, v in data.pop("series", {}).items()}
        return cls(series=series, **data)


def emit(report: Report, fmt: str = "table") -> bytes:
    fmt = fmt.lower()
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode()
    if fmt == "table":
        return render_table(report).encode()
    raise ValueError(f"unknown report format {fmt!r}")


def parse(data: bytes) -> Report:
    return Report.from_dict(json.loads(data))


def _table(columns: list[str], rows: list[list]) -> list[str]:
    cells = [[str(c) for c in columns]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cells[0], widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells[1:]:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return lines


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_table(report: Report) -> str:
    out = [f"report: {report.name or '(unnamed)'}  seed={report.seed}"]
    if report.breakdown:
        out += ["", "workflow breakdown (modeled us)"]
        rows = [[r["step"], r["label"], r["count"], round(r["mean_ns"] / 1000, 3)]
                for r in report.breakdown]
        rows.append(["", "Total", "", round(report.breakdown_total_ns / 1000, 3)])
        out += _table(["step", "label", "count", "mean_us"], rows)
    if report.workflow:
        out += ["", "workflow: " + ", ".join(f"{k}={v}" for k, v in report.workflow.items())]
    if report.verdicts:
        out += [""]
        rows = [[name, v["expected"], v["observed"], "PASS" if v["holds"] else "FAIL"]
                for name, v in report.verdicts.items()]
        out += _table(["attack", "expected", "observed", "verdict"], rows)
    for name, table in report.tables.items():
        out += ["", name]
        out += _table(table["columns"], table["rows"])
    for name, points in report.series.items():
        out += ["", f"series {name}"]
        out += _table(["x", "y"], points)
    if report.counters:
        out += ["", "counters"]
        out += _table(["counter", "value"], [[k, v] for k, v in report.counters.items()])
    if report.invariants:
        out += ["", "invariants"]
        out += _table(["invariant", "ok", "detail"],
                      [[k, v["ok"], v["detail"]] for k, v in report.invariants.items()])
    if report.errors:
        out += ["", "errors"] + [f"  {e}" for e in report.errors]
    return "\n".join(out) + "\n"
