"""Run reports: one JSON document plus a CSV per table.

Wall time goes to a separate ``<kind>.timing.json`` so that repeated runs
with the same settings produce byte-identical reports.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field


def ema(values, coefficient: float = 0.9) -> list:
    """``s_0 = x_0``, then ``s_t = c * s_(t-1) + (1 - c) * x_t``."""
    out = []
    s = None
    for v in values:
        s = v if s is None else coefficient * s + (1 - coefficient) * v
        out.append(s)
    return out


@dataclass
class RunReport:
    kind: str
    config: dict
    summary: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> list of row dicts
    checks: dict = field(default_factory=dict)  # name -> bool
    text: dict = field(default_factory=dict)  # name -> preformatted block

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "summary": self.summary,
            "tables": self.tables,
            "checks": self.checks,
            "text": self.text,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        return cls(d["kind"], d["config"], d["summary"], d["tables"], d["checks"], d.get("text", {}))


def table_csv(rows: list) -> str:
    """CSV text whose first line names the columns."""
    cols: list = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) for k, v in r.items()})
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def emit_report(report: RunReport, out_dir: str, wall_time: float | None = None) -> list:
    """Write the JSON report and one CSV per table; returns the written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        p = os.path.join(out_dir, f"{report.kind}.json")
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        paths.append(p)
        for name, rows in report.tables.items():
            p = os.path.join(out_dir, f"{report.kind}.{name}.csv")
            with open(p, "w", encoding="utf-8") as fh:
                fh.write(table_csv(rows))
            paths.append(p)
        if wall_time is not None:
            p = os.path.join(out_dir, f"{report.kind}.timing.json")
            with open(p, "w", encoding="utf-8") as fh:
                json.dump({"wall_time_s": wall_time}, fh)
            paths.append(p)
    except OSError as e:
        raise OSError(f"cannot write report to {out_dir}: {e.strerror}") from e
    return paths


def load_report(path: str) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def format_table(rows: list, digits: int = 6) -> str:
    """Fixed-width text rendering for the terminal."""
    if not rows:
        return ""
    cols: list = []
    for r in rows:
        cols += [k for k in r if k not in cols]

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.{digits}g}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
