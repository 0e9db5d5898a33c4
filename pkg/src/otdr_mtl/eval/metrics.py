"""Classification and regression scores, Wilson intervals and improvement deltas.

Undefined ratios (zero denominators) are reported as ``None`` rather than 0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidArgument

CLASSIFICATION_FIELDS = ("accuracy", "precision", "recall", "f1")
ERROR_FIELDS = ("rmse_position_m", "mae_position_m", "rmse_reflectance_db", "mae_reflectance_db")


@dataclass(frozen=True)
class ConfusionCounts:
    n_tp: int = 0
    n_tn: int = 0
    n_fp: int = 0
    n_fn: int = 0

    def __post_init__(self):
        if min(self.n_tp, self.n_tn, self.n_fp, self.n_fn) < 0:
            raise InvalidArgument("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)), int(np.sum(t & ~p)))

    @property
    def total(self) -> int:
        return self.n_tp + self.n_tn + self.n_fp + self.n_fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.n_tp + other.n_tp, self.n_tn + other.n_tn,
                               self.n_fp + other.n_fp, self.n_fn + other.n_fn)


@dataclass
class Metrics:
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    rmse_position_m: float | None = None
    mae_position_m: float | None = None
    rmse_reflectance_db: float | None = None
    mae_reflectance_db: float | None = None
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def classification_metrics(counts: ConfusionCounts, z: float | None = 1.96) -> Metrics:
    """Accuracy, precision, recall and F1, with Wilson intervals on the three rates."""
    if counts.total <= 0:
        raise InvalidArgument("no instances to score")
    acc = (counts.n_tp + counts.n_tn) / counts.total
    prec = _ratio(counts.n_tp, counts.n_tp + counts.n_fp)
    rec = _ratio(counts.n_tp, counts.n_tp + counts.n_fn)
    f1 = None
    if prec is not None and rec is not None:
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else None
    m = Metrics(accuracy=acc, precision=prec, recall=rec, f1=f1)
    if z is not None:
        m.intervals["accuracy"] = wilson_interval(counts.n_tp + counts.n_tn, counts.total, z)
        if prec is not None:
            m.intervals["precision"] = wilson_interval(counts.n_tp, counts.n_tp + counts.n_fp, z)
        if rec is not None:
            m.intervals["recall"] = wilson_interval(counts.n_tp, counts.n_tp + counts.n_fn, z)
    return m


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    if not 0 <= successes <= trials:
        raise InvalidArgument("successes must lie in [0, trials]")
    n = trials
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    spread = z * math.sqrt(p * (1.0 - p) / n + z2 / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - spread)
    hi = 1.0 if successes == n else min(1.0, center + spread)
    return lo, hi


def regression_metrics(pred, truth) -> tuple[float, float]:
    """``(rmse, mae)`` of paired predictions."""
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size == 0 or p.size != t.size:
        raise InvalidArgument("pred and truth must be non-empty and of equal length")
    err = p - t
    return float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err)))


def detection_rates(counts: ConfusionCounts) -> tuple[float | None, float | None]:
    """Detection probability and false-alarm probability."""
    return (_ratio(counts.n_tp, counts.n_tp + counts.n_fn),
            _ratio(counts.n_fp, counts.n_fp + counts.n_tn))


def improvement_delta(multi: Metrics, single: Metrics) -> dict[str, float | None]:
    """Gain of the multitask model over a single-task one.

    Rates: plain difference.  Errors: ``1 - m_multi / m_single``.
    """
    out: dict[str, float | None] = {}
    for name in CLASSIFICATION_FIELDS:
        a, b = getattr(multi, name), getattr(single, name)
        out[name] = None if a is None or b is None else a - b
    for name in ERROR_FIELDS:
        a, b = getattr(multi, name), getattr(single, name)
        out[name] = None if a is None or b is None or b == 0 else 1.0 - a / b
    return out
