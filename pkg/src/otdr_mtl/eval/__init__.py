"""Scoring and study runners."""
from .metrics import (
    ConfusionCounts,
    Metrics,
    classification_metrics,
    detection_rates,
    improvement_delta,
    regression_metrics,
    wilson_interval,
)
from .studies import (
    CompareSpec,
    StudyReport,
    StudySpec,
    compare_detectors,
    evaluate_model,
    run_study,
)

__all__ = [
    "CompareSpec", "ConfusionCounts", "Metrics", "StudyReport", "StudySpec",
    "classification_metrics", "compare_detectors", "detection_rates", "evaluate_model",
    "improvement_delta", "regression_metrics", "run_study", "wilson_interval",
]
