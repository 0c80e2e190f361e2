"""Human-readable comparison report over finished experiment runs."""

from __future__ import annotations

import json
import shutil
from pathlib import Path

COLUMNS = ("run", "task", "accuracy", "chance_accuracy", "final_loss", "total", "threshold", "total_flops")


def _load_summary(run_dir):
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


def emit_report(run_dirs, out_dir):
    """One table row per run; missing artifacts are marked absent, never fatal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in run_dirs:
        run = Path(run)
        summary = _load_summary(run)
        if summary is None:
            rows.append({"run": run.name, "task": "absent"})
            continue
        row = {"run": run.name}
        for key in COLUMNS[1:]:
            if key == "total_flops" and isinstance(summary.get("total_flops"), dict):
                row[key] = ";".join(f"{k}={v}" for k, v in sorted(summary["total_flops"].items()))
            elif key in summary:
                row[key] = summary[key]
        rows.append(row)
        hist = run / "histogram.csv"
        if hist.exists():
            shutil.copyfile(hist, out / f"{run.name}_histogram.csv")

    lines = ["# Run comparison", "", "| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for row in rows:
        lines.append("| " + " | ".join(str(row.get(c, "absent")) for c in COLUMNS) + " |")
    report = "\n".join(lines) + "\n"
    (out / "report.md").write_text(report)
    return report
