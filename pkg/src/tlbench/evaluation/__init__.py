"""Metric suite, reports and plots."""
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    RocCurve,
    averaging_mode,
    check_consistency,
    confusion,
    evaluate_scores,
    predict_labels,
    roc_and_auc,
    scalar_metrics,
)
from .report import (
    LEADERBOARD_COLUMNS,
    classification_report,
    format_leaderboard,
    format_report,
    load_reports,
    parse_report,
    write_leaderboard,
    write_report_dir,
)

__all__ = [
    "ConfusionMatrix",
    "LEADERBOARD_COLUMNS",
    "MetricReport",
    "RocCurve",
    "averaging_mode",
    "check_consistency",
    "classification_report",
    "confusion",
    "evaluate_scores",
    "format_leaderboard",
    "format_report",
    "load_reports",
    "parse_report",
    "predict_labels",
    "roc_and_auc",
    "scalar_metrics",
    "write_leaderboard",
    "write_report_dir",
]
