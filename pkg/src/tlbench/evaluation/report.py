"""Classification reports, per-model report directories and the leaderboard."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ..errors import MissingArtifactError
from .metrics import MetricReport, RocCurve

LEADERBOARD_COLUMNS = ("Model", "Accuracy", "Precision", "Recall", "F1", "AUC")
_FIELDS = ("accuracy", "precision", "recall", "f1", "auc")
_HEADER = ("precision", "recall", "f1-score", "support")


def report_record(report: MetricReport, class_names: Sequence[str] | None = None) -> dict:
    """Structured per-class breakdown plus the averaged row."""
    names = list(class_names) if class_names else [str(r["label"]) for r in report.per_class]
    rows = [
        {
            "name": names[i],
            "precision": r["precision"],
            "recall": r["recall"],
            "f1": r["f1"],
            "support": r["support"],
        }
        for i, r in enumerate(report.per_class)
    ]
    total = sum(r["support"] for r in rows)
    return {
        "classes": rows,
        "accuracy": report.accuracy,
        "support": total,
        "average": {
            "name": f"{report.averaging} avg",
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "support": total,
        },
    }


def _num(x: float) -> str:
    # repr round-trips floats exactly
    return repr(float(x))


def format_report(record: Mapping) -> str:
    """Render a record as a text table; :func:`parse_report` inverts it."""
    width = max([len(r["name"]) for r in record["classes"]] + [len(record["average"]["name"]), 8])
    lines = [" " * width + "  " + "  ".join(f"{h:>20}" for h in _HEADER), ""]

    def row(name, cells):
        return f"{name:>{width}}  " + "  ".join(f"{c:>20}" for c in cells)

    for r in record["classes"]:
        lines.append(row(r["name"], [_num(r["precision"]), _num(r["recall"]),
                                     _num(r["f1"]), str(r["support"])]))
    lines.append("")
    lines.append(row("accuracy", ["", "", _num(record["accuracy"]), str(record["support"])]))
    avg = record["average"]
    lines.append(row(avg["name"], [_num(avg["precision"]), _num(avg["recall"]),
                                   _num(avg["f1"]), str(avg["support"])]))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    lines = [ln for ln in text.splitlines()[1:] if ln.strip()]
    classes, accuracy, average = [], None, None
    for ln in lines:
        tokens = ln.split()
        if tokens[0] == "accuracy" and len(tokens) == 3:
            accuracy, support = float(tokens[1]), int(tokens[2])
            continue
        name = " ".join(tokens[:-4])
        entry = {
            "name": name,
            "precision": float(tokens[-4]),
            "recall": float(tokens[-3]),
            "f1": float(tokens[-2]),
            "support": int(tokens[-1]),
        }
        if accuracy is None:
            classes.append(entry)
        else:
            average = entry
    return {"classes": classes, "accuracy": accuracy, "support": support, "average": average}


def classification_report(
    report: MetricReport, class_names: Sequence[str] | None = None
) -> tuple[str, dict]:
    record = report_record(report, class_names)
    return format_report(record), record


def write_report_dir(
    out_dir: str | Path,
    model_name: str,
    report: MetricReport,
    roc: RocCurve | None = None,
    class_names: Sequence[str] | None = None,
    sequence: int = 0,
    provenance: Mapping | None = None,
    plots: bool = True,
) -> Path:
    """Write metrics.json, report.txt and (optionally) confusion/ROC plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"model": model_name, "sequence": sequence, **report.to_dict()}
    if provenance:
        payload["provenance"] = dict(provenance)
    (out / "metrics.json").write_text(json.dumps(payload, indent=2))
    text, _ = classification_report(report, class_names)
    (out / "report.txt").write_text(text)
    if plots:
        from .plots import plot_confusion, plot_roc

        plot_confusion(report.confusion, out / "confusion.png", class_names)
        if roc is not None:
            plot_roc(roc, out / "roc.png", title=model_name)
    return out


def load_reports(reports_dir: str | Path) -> list[dict]:
    """All ``*/metrics.json`` under a directory, ordered by (sequence, model)."""
    root = Path(reports_dir)
    found = sorted(root.glob("*/metrics.json")) if root.is_dir() else []
    if not found:
        raise MissingArtifactError(f"reports in {root} (no reports found)", "evaluate")
    reports = [json.loads(p.read_text()) for p in found]
    return sorted(reports, key=lambda r: (r.get("sequence", 0), r["model"]))


def leaderboard_rows(reports: Iterable[Mapping]) -> list[list[str]]:
    rows = []
    for r in reports:
        cells = [r["model"]]
        for name in _FIELDS:
            value = r.get(name)
            cells.append("" if value is None else f"{value:.5f}")
        rows.append(cells)
    return rows


def format_leaderboard(reports: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LEADERBOARD_COLUMNS)
    writer.writerows(leaderboard_rows(reports))
    return buf.getvalue()


def write_leaderboard(reports: Sequence[Mapping], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_leaderboard(reports))
    return path


def markdown_summary(reports: Sequence[Mapping]) -> str:
    lines = ["| " + " | ".join(LEADERBOARD_COLUMNS) + " |",
             "|" + "---|" * len(LEADERBOARD_COLUMNS)]
    lines += ["| " + " | ".join(row) + " |" for row in leaderboard_rows(reports)]
    scored = [r for r in reports if r.get("accuracy") is not None]
    if scored:
        best = max(scored, key=lambda r: r["accuracy"])
        lines += ["", f"Best accuracy: {best['model']} ({best['accuracy']:.5f})"]
    return "\n".join(lines) + "\n"
