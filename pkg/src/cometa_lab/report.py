"""Markdown / JSON report files and their figures.

``report.json`` fields (schema_version 1):

* ``phases``: phase names in protocol order
* ``methods``: method names in run order
* ``seeds``: seeds in run order
* ``mean``: ``{method: {phase: {"auc": float, "logloss": float}}}``
* ``per_seed``: list of ``{"method", "seed", "metrics"}`` with the same inner shape
* ``warnings``: phase-trend diagnostics (mean AUC falling between phases)

Wall-clock times are deliberately left out so reruns are byte-identical.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from . import plotting
from .evalharness import PHASES, PhaseReport, phase_trend_warnings, summarize

SCHEMA_VERSION = 1


def _ordered(values):
    return list(dict.fromkeys(values))


def report_dict(reports: Sequence[PhaseReport]) -> dict:
    if not reports:
        raise ValueError("no reports to emit")
    phases = [p for p in PHASES if any(p in r.metrics for r in reports)]
    return {
        "schema_version": SCHEMA_VERSION,
        "phases": phases,
        "methods": _ordered(r.method for r in reports),
        "seeds": _ordered(r.seed for r in reports),
        "mean": summarize(reports),
        "per_seed": [{"method": r.method, "seed": r.seed, "metrics": r.metrics} for r in reports],
        "warnings": phase_trend_warnings(reports),
    }


def _table(rows: list[tuple[str, dict]], phases: Sequence[str]) -> list[str]:
    head = "| Method | " + " | ".join(f"{p} AUC | {p} Logloss" for p in phases) + " |"
    sep = "|---|" + "---|---|" * len(phases)
    lines = [head, sep]
    for name, metrics in rows:
        cells = []
        for p in phases:
            m = metrics.get(p)
            cells += [f"{m['auc']:.4f}", f"{m['logloss']:.4f}"] if m else ["-", "-"]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return lines


def render_markdown(data: dict) -> str:
    phases = data["phases"]
    seeds = data["seeds"]
    out = ["# New-item test results", "",
           f"Seeds: {', '.join(str(s) for s in seeds)}", "",
           f"## Mean over {len(seeds)} seed(s)", ""]
    out += _table([(m, data["mean"][m]) for m in data["methods"]], phases)
    if len(seeds) > 1:
        out += ["", "## Per seed"]
        for seed in seeds:
            rows = [(r["method"], r["metrics"]) for r in data["per_seed"] if r["seed"] == seed]
            out += ["", f"### Seed {seed}", ""] + _table(rows, phases)
    if data["warnings"]:
        out += ["", "## Warnings", ""] + [f"- {w}" for w in data["warnings"]]
    return "\n".join(out) + "\n"


def emit_report(reports: Sequence[PhaseReport], out_dir, figures: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = report_dict(reports)
    paths = {"md": out_dir / "report.md", "json": out_dir / "report.json"}
    paths["md"].write_text(render_markdown(data))
    paths["json"].write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    if figures:
        paths["png"] = plotting.phase_figure(data["mean"], data["phases"], out_dir / "report_phases.png")
    return paths


def reports_from_json(path) -> list[PhaseReport]:
    data = json.loads(Path(path).read_text())
    return [PhaseReport(r["method"], r["seed"], r["metrics"]) for r in data["per_seed"]]
