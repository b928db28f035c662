"""Comparison tables built from finished run directories."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .reward import TeacherReference

COLUMNS = ("method", "accuracy", "drop", "parameters", "ratio", "latency_ms", "speedup", "reward")


@dataclass
class ReportRow:
    method: str
    accuracy: float | None = None
    parameters: int | None = None
    latency: float | None = None
    reward: float | None = None
    teacher: TeacherReference | None = None
    note: str = ""

    @property
    def complete(self) -> bool:
        return None not in (self.accuracy, self.parameters, self.latency, self.teacher)

    @property
    def drop(self) -> float | None:
        """Accuracy drop against the teacher, in percentage points."""
        return None if not self.complete else 100.0 * (self.teacher.accuracy - self.accuracy)

    @property
    def ratio(self) -> float | None:
        return None if not self.complete else self.teacher.parameters / self.parameters

    @property
    def speedup(self) -> float | None:
        return None if not self.complete else self.teacher.latency / self.latency

    def cells(self) -> dict[str, object]:
        return {
            "method": self.method if self.complete else f"{self.method} (incomplete{': ' + self.note if self.note else ''})",
            "accuracy": self.accuracy,
            "drop": self.drop,
            "parameters": self.parameters,
            "ratio": self.ratio,
            "latency_ms": None if self.latency is None else 1000.0 * self.latency,
            "speedup": self.speedup,
            "reward": self.reward,
        }


def _read_json(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError):
        return None


def _run_name(run_dir: Path) -> str:
    snap = run_dir / "config.snapshot"
    if snap.exists():
        from .config import loads_config, ConfigError
        try:
            return loads_config(snap.read_text(encoding="utf-8")).name
        except ConfigError:
            pass
    return run_dir.name


def rows_for_run(run_dir: str | Path, include_teacher: bool = True) -> list[ReportRow]:
    """Teacher row, best-student row, stage-2 row and pruning rounds found in ``run_dir``."""
    run_dir = Path(run_dir)
    name = _run_name(run_dir)
    t = _read_json(run_dir / "teacher.json")
    ref = TeacherReference(t["accuracy"], t["latency"], t["parameters"]) if t else None
    rows = []
    if include_teacher and ref is not None:
        rows.append(ReportRow(f"{name}: teacher", ref.accuracy, ref.parameters, ref.latency, None, ref))
    for label, sub in (("", "best"), (" + filter pruning", "best/stage2")):
        rec = _read_json(run_dir / sub / "record.json")
        if rec is None:
            if sub == "best" and (run_dir / "iterations.jsonl").exists():
                rows.append(ReportRow(name, teacher=ref, note="no best record"))
            continue
        rows.append(ReportRow(name + label, rec["accuracy"], rec["parameters"], rec["latency"],
                              rec["reward"], ref, "" if ref else "no teacher.json"))
    rounds = run_dir / "prune" / "rounds.jsonl"
    if rounds.exists():
        for line in rounds.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            base = ref
            if rec["round"] == 0:
                if ref is None:
                    base = TeacherReference(rec["accuracy"], rec["latency"], rec["parameters"])
                    ref = base
                continue
            rows.append(ReportRow(f"{name}: prune round {rec['round']}", rec["accuracy"], rec["parameters"],
                                  rec["latency"], rec["reward"], base))
        if include_teacher and not any(r.method.endswith("teacher") for r in rows) and ref is not None:
            rows.insert(0, ReportRow(f"{name}: teacher", ref.accuracy, ref.parameters, ref.latency, None, ref))
    if not rows:
        rows.append(ReportRow(name, note="no records"))
    return rows


def collect_rows(run_dirs, include_teacher: bool = True) -> list[ReportRow]:
    return [row for d in run_dirs for row in rows_for_run(d, include_teacher)]


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def format_text(rows: list[ReportRow]) -> str:
    table = [list(COLUMNS)] + [[_fmt(v) for v in r.cells().values()] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
             for line in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r.cells().values()])
    return buf.getvalue()
