"""Evaluation reports and Obj./Gap/Time tables grouped by (env, N, M).

A report file holds only reproducible numbers. Wall-clock time per instance
goes to a sidecar ``<report>.timing.json`` so reruns stay byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class EvalRow:
    env: str
    n: int
    m: int
    method: str
    mode: str
    objective: float
    steps: float
    conflict_rate: float
    instances: int
    time: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            d.pop("time")
            rows.append(d)
        return {"rows": rows}

    def write(self, path) -> None:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        if path is None:
            return
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        timing = {"time_per_instance": [r.time for r in self.rows]}
        timing_path(path).write_text(json.dumps(timing, indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "EvalReport":
        path = Path(path)
        d = json.loads(path.read_text())
        rows = [EvalRow(**r) for r in d["rows"]]
        tp = timing_path(path)
        if tp.exists():
            times = json.loads(tp.read_text())["time_per_instance"]
            for r, t in zip(rows, times):
                r.time = t
        return cls(rows)


def timing_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".timing.json")


def with_gaps(reports) -> list[tuple[EvalRow, float]]:
    """Rows in group order with the gap to the best objective of their group."""
    rows = [r for rep in reports for r in rep.rows]
    groups: dict[tuple, list[EvalRow]] = {}
    for r in rows:
        groups.setdefault((r.env, r.n, r.m), []).append(r)
    out = []
    for key in sorted(groups):
        best = min(r.objective for r in groups[key])
        for r in groups[key]:
            gap = 0.0 if r.objective == best else (r.objective - best) / best * 100.0
            out.append((r, gap))
    return out


def _cells(r: EvalRow, gap: float) -> list[str]:
    t = "-" if r.time is None else f"{r.time:.4f}s"
    return [r.env, str(r.n), str(r.m), f"{r.method} ({r.mode})", f"{r.objective:.4f}", f"{gap:.2f}%", t]


HEADER = ["Env", "N", "M", "Method", "Obj.", "Gap", "Time"]


def render_markdown(reports) -> str:
    lines = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
    for r, gap in with_gaps(reports):
        lines.append("| " + " | ".join(_cells(r, gap)) + " |")
    return "\n".join(lines) + "\n"


def render_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r, gap in with_gaps(reports):
        w.writerow(_cells(r, gap))
    return buf.getvalue()
