"""Run artifacts: summary.json, typed CSV tables, and a schema file documenting them."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__

TABLE_DOCS = {
    "per_trial": "one row per trial (and per algorithm/sigma where relevant)",
    "per_step": "per-step bound contributions of the reported best schedule(s)",
    "curve": "bound versus perturbation level against the measured gap",
    "rate": "closed-form bound across the n grid",
    "lemma": "quadrature KL against coupling bounds per random instance",
    "grid": "bound totals for every schedule in the searched covariance family",
    "generic_curve": "output-perturbation bound across the covariance grid",
    "comparison": "paired SGD/SGLD statistics per noise level",
}


@dataclass
class Table:
    columns: list
    rows: list = field(default_factory=list)

    def add(self, **values):
        missing = set(self.columns) ^ set(values)
        if missing:
            raise KeyError(f"table row keys differ from columns: {sorted(missing)}")
        self.rows.append([values[c] for c in self.columns])

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def types(self) -> list:
        out = []
        for i, _ in enumerate(self.columns):
            kinds = {type(r[i]).__name__ for r in self.rows}
            if kinds <= {"bool"} and kinds:
                out.append("bool")
            elif kinds <= {"int"} and kinds:
                out.append("int")
            elif kinds <= {"int", "float"} and kinds:
                out.append("float")
            else:
                out.append("str")
        return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind: str):
    if kind == "bool":
        return text == "true"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


@dataclass
class RunArtifact:
    command: str
    config: dict
    summary: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    plots: list = field(default_factory=list)
    attachments: dict = field(default_factory=dict)
    tool_version: str = __version__
    wall_clock: Optional[float] = None
    exit_code: int = 0

    def summary_json(self) -> str:
        doc = {
            "tool": "genbound",
            "tool_version": self.tool_version,
            "command": self.command,
            "exit_code": self.exit_code,
            "config": self.config,
            "summary": self.summary,
            "reports": self.reports,
            "tables": sorted(self.tables),
            "plots": self.plots,
            "attachments": sorted(self.attachments),
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def schema(self) -> dict:
        return {
            name: {"file": f"{name}.csv", "doc": TABLE_DOCS.get(name, ""),
                   "columns": [{"name": c, "type": t} for c, t in zip(tab.columns, tab.types())]}
            for name, tab in sorted(self.tables.items())
        }


def emit(artifact: RunArtifact, out_dir) -> Path:
    """Write the artifact; wall-clock goes to timing.json so other files stay reproducible."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(artifact.summary_json())
    for name, table in artifact.tables.items():
        (out / f"{name}.csv").write_text(table_csv(table))
    for name, text in artifact.attachments.items():
        (out / name).write_text(text)
    (out / "schema.json").write_text(json.dumps(artifact.schema(), indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": artifact.wall_clock}) + "\n")
    return out


def load(out_dir) -> RunArtifact:
    out = Path(out_dir)
    doc = json.loads((out / "summary.json").read_text())
    schema = json.loads((out / "schema.json").read_text())
    tables = {}
    for name in doc["tables"]:
        cols = schema[name]["columns"]
        with open(out / f"{name}.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != [c["name"] for c in cols]:
                raise ValueError(f"{name}.csv header does not match schema")
            rows = [[_parse(v, c["type"]) for v, c in zip(r, cols)] for r in reader]
        tables[name] = Table(header, rows)
    timing_path = out / "timing.json"
    wall = json.loads(timing_path.read_text())["wall_clock_seconds"] if timing_path.exists() else None
    return RunArtifact(
        command=doc["command"], config=doc["config"], summary=doc["summary"], reports=doc["reports"],
        tables=tables, plots=doc["plots"],
        attachments={name: (out / name).read_text() for name in doc.get("attachments", [])}, tool_version=doc["tool_version"], wall_clock=wall,
        exit_code=doc["exit_code"],
    )
