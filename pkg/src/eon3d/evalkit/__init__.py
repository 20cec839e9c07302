"""Detection metrics, equivariance diagnostics and evaluation reports."""

from .metrics import average_precision, match_detections, orientation_accuracy, ranking
from .probe import ProbeReport, ProbeRow, equivariance_probe, rotate_object
from .report import DEFAULT_THRESHOLDS, detection_metrics, evaluate, write_report

__all__ = [
    "average_precision", "match_detections", "orientation_accuracy", "ranking", "ProbeReport",
    "ProbeRow", "equivariance_probe", "rotate_object", "DEFAULT_THRESHOLDS", "detection_metrics",
    "evaluate", "write_report",
]
