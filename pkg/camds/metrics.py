"""Diagnostic metrics, patient aggregation, ROC analysis and fold reports.

The abnormal class is the positive class. A probability equal to the
threshold counts as abnormal. Undefined ratios are reported as NaN.
"""

import csv
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from camds.errors import (
    EmptyClipError,
    LabelError,
    ManifestError,
    ShapeError,
    UndefinedMetricError,
)
from camds.images import save_pgm

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
PREDICTIONS_HEADER = ("patient_id", "frame_index", "prob", "label")
ROC_HEADER = ("threshold", "sensitivity", "specificity")
REPORT_HEADER = ("fold", "sensitivity", "specificity", "accuracy", "f1")
AVERAGE_ROW = "average"


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else float("nan")


# -- frame metrics ------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class DiagnosticMetrics:
    sensitivity: float
    specificity: float
    accuracy: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "f1": self.f1,
        }


def _check_labels(labels: np.ndarray) -> None:
    bad = labels[(labels != 0) & (labels != 1)]
    if bad.size:
        raise LabelError(f"labels must be 0 or 1, got {bad[0]!r}")


def confusion(
    probs: Sequence[float],
    labels: Sequence[int],
    threshold: float = DEFAULT_THRESHOLD,
) -> ConfusionCounts:
    """Count outcomes with ``prob >= threshold`` predicting abnormal."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ShapeError(f"probs {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise UndefinedMetricError("confusion counts need at least one prediction")
    _check_labels(y)
    predicted = p >= threshold
    actual = y == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


def metrics(counts: ConfusionCounts) -> DiagnosticMetrics:
    return DiagnosticMetrics(
        sensitivity=_ratio(counts.tp, counts.tp + counts.fn),
        specificity=_ratio(counts.tn, counts.tn + counts.fp),
        accuracy=_ratio(counts.tp + counts.tn, counts.total),
        f1=_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
    )


# -- patient aggregation -------------------------------------------------------


def aggregate_patient(frame_probs: Iterable[float]) -> float:
    """Mean frame probability of one patient clip.

    The sum is exactly rounded, so the result does not depend on frame order.
    """
    values = [float(v) for v in frame_probs]
    if not values:
        raise EmptyClipError("patient has no informative frames")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("frame probabilities must lie in [0, 1]")
    mean = math.fsum(values) / len(values)
    return min(max(mean, min(values)), max(values))


@dataclass(frozen=True)
class PredictionRow:
    patient_id: str
    frame_index: int
    prob: float
    label: int


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    frame_probs: tuple[float, ...]
    aggregate: float
    predicted: int
    label: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


@dataclass(frozen=True)
class PatientFailure:
    prediction: PatientPrediction
    direction: str

    @property
    def margin(self) -> float:
        return abs(self.prediction.aggregate - DEFAULT_THRESHOLD)


def predict_patient(
    patient_id: str, frame_probs: Sequence[float], label: int, threshold: float = DEFAULT_THRESHOLD
) -> PatientPrediction:
    aggregate = aggregate_patient(frame_probs)
    probs = tuple(float(p) for p in frame_probs)
    return PatientPrediction(patient_id, probs, aggregate, int(aggregate >= threshold), label)


def patient_predictions(
    rows: Iterable[PredictionRow], threshold: float = DEFAULT_THRESHOLD
) -> list[PatientPrediction]:
    """Group frame rows by patient (sorted by id), frames ordered by index."""
    grouped: dict[str, list[PredictionRow]] = {}
    for row in rows:
        grouped.setdefault(row.patient_id, []).append(row)
    predictions = []
    for pid in sorted(grouped):
        frames = sorted(grouped[pid], key=lambda r: r.frame_index)
        labels = {r.label for r in frames}
        if len(labels) != 1:
            raise LabelError(f"patient {pid} has frames with labels {sorted(labels)}")
        predictions.append(predict_patient(pid, [r.prob for r in frames], labels.pop(), threshold))
    return predictions


def patient_failures(predictions: Iterable[PatientPrediction]) -> list[PatientFailure]:
    """Misclassified patients, most confidently wrong first (ties by patient id)."""
    failures = [
        PatientFailure(p, "false positive" if p.predicted == 1 else "false negative")
        for p in predictions
        if not p.correct
    ]
    failures.sort(key=lambda f: (-f.margin, f.prediction.patient_id))
    return failures


def write_predictions(rows: Iterable[PredictionRow], path: Union[str, Path]) -> int:
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PREDICTIONS_HEADER)
        for row in rows:
            writer.writerow([row.patient_id, row.frame_index, repr(float(row.prob)), row.label])
            count += 1
    return count


def read_predictions(path: Union[str, Path]) -> list[PredictionRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTIONS_HEADER:
            raise ManifestError(
                f"predictions header must be {','.join(PREDICTIONS_HEADER)}", line=1
            )
        for row in reader:
            if not row:
                continue
            if len(row) != len(PREDICTIONS_HEADER):
                raise ManifestError(f"expected 4 fields, got {len(row)}", line=reader.line_num)
            try:
                prob = float(row[2])
                frame_index = int(row[1])
                label = int(row[3])
            except ValueError as exc:
                raise ManifestError(str(exc), line=reader.line_num) from exc
            if label not in (0, 1) or not 0.0 <= prob <= 1.0:
                raise ManifestError(
                    f"label must be 0/1 and prob in [0, 1], got {row[3]!r}, {row[2]!r}",
                    line=reader.line_num,
                )
            rows.append(PredictionRow(row[0], frame_index, prob, label))
    return rows


# -- ROC -----------------------------------------------------------------------


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tp: int
    fp: int
    sensitivity: float
    fpr: float

    @property
    def specificity(self) -> float:
        return 1.0 - self.fpr


@dataclass(frozen=True)
class RocCurve:
    points: tuple[RocPoint, ...]
    positives: int
    negatives: int

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class OperatingPoint:
    target: float
    threshold: float
    sensitivity: float
    specificity: float


def roc(probs: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Sweep the threshold over the unique probabilities, highest first.

    The curve starts at (0, 0) with an infinite threshold and ends at (1, 1)
    at the lowest probability. Tied probabilities form a single point.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ShapeError(f"probs {p.shape} and labels {y.shape} must be equal-length vectors")
    _check_labels(y)
    positives = int(np.sum(y == 1))
    negatives = int(y.size - positives)
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError(
            f"AUC undefined: labels contain a single class ({positives} abnormal, "
            f"{negatives} normal)"
        )
    order = np.argsort(-p, kind="stable")
    sorted_p = p[order]
    tps = np.cumsum(y[order] == 1)
    fps = np.cumsum(y[order] != 1)
    # last index of each run of equal probabilities
    ends = np.flatnonzero(np.append(sorted_p[1:] != sorted_p[:-1], True))
    points = [RocPoint(math.inf, 0, 0, 0.0, 0.0)]
    for i in ends:
        tp, fp = int(tps[i]), int(fps[i])
        points.append(RocPoint(float(sorted_p[i]), tp, fp, tp / positives, fp / negatives))
    return RocCurve(tuple(points), positives, negatives)


def auc(curve: RocCurve) -> float:
    """Trapezoid area, accumulated on integer counts and divided once."""
    if curve.positives == 0 or curve.negatives == 0:
        raise UndefinedMetricError("AUC undefined: labels contain a single class")
    twice_area = 0
    for a, b in zip(curve.points, curve.points[1:]):
        twice_area += (b.fp - a.fp) * (b.tp + a.tp)
    return float(Fraction(twice_area, 2 * curve.positives * curve.negatives))


def operating_point(curve: RocCurve, target_sensitivity: float) -> OperatingPoint:
    """Highest specificity among points with sensitivity >= target (ties: higher threshold)."""
    eligible = [pt for pt in curve.points if pt.sensitivity >= target_sensitivity]
    if not eligible:
        raise UndefinedMetricError(f"no ROC point reaches sensitivity {target_sensitivity}")
    best = max(eligible, key=lambda pt: (pt.specificity, pt.threshold))
    return OperatingPoint(target_sensitivity, best.threshold, best.sensitivity, best.specificity)


def write_roc_csv(curve: RocCurve, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROC_HEADER)
        for pt in curve.points:
            writer.writerow([repr(pt.threshold), repr(pt.sensitivity), repr(pt.specificity)])


def render_roc(curve: RocCurve, size: int = 256) -> np.ndarray:
    """Grayscale plot: white background, gray chance diagonal, black curve."""
    image = np.full((size, size), 255, dtype=np.uint8)
    last = size - 1
    diagonal = np.arange(size)
    image[last - diagonal, diagonal] = 160
    for a, b in zip(curve.points, curve.points[1:]):
        steps = int(max(abs(b.fpr - a.fpr), abs(b.sensitivity - a.sensitivity)) * last) + 2
        t = np.linspace(0.0, 1.0, steps)
        xs = np.rint((a.fpr + t * (b.fpr - a.fpr)) * last).astype(np.intp)
        ys = np.rint((a.sensitivity + t * (b.sensitivity - a.sensitivity)) * last).astype(np.intp)
        image[last - ys, xs] = 0
    return image


def write_roc_pgm(curve: RocCurve, path: Union[str, Path], size: int = 256) -> None:
    save_pgm(render_roc(curve, size), path)


# -- fold reports ----------------------------------------------------------------


@dataclass(frozen=True)
class FoldMetrics:
    fold: str
    sensitivity: float
    specificity: float
    accuracy: float
    f1: float

    @classmethod
    def from_metrics(cls, fold: Union[int, str], m: DiagnosticMetrics) -> "FoldMetrics":
        return cls(str(fold), m.sensitivity, m.specificity, m.accuracy, m.f1)

    def values(self) -> tuple[float, float, float, float]:
        return (self.sensitivity, self.specificity, self.accuracy, self.f1)


def fold_report(rows: Sequence[FoldMetrics]) -> list[FoldMetrics]:
    """Per-fold rows followed by their unweighted average (NaN propagates)."""
    if not rows:
        raise UndefinedMetricError("fold report needs at least one fold")
    columns = np.array([r.values() for r in rows], dtype=np.float64)
    sens, spec, acc, f1 = (float(v) for v in columns.mean(axis=0))
    return [*rows, FoldMetrics(AVERAGE_ROW, sens, spec, acc, f1)]


def write_report_csv(rows: Iterable[FoldMetrics], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in rows:
            writer.writerow([r.fold, *(repr(v) for v in r.values())])


def read_report_csv(path: Union[str, Path], include_average: bool = False) -> list[FoldMetrics]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != REPORT_HEADER:
            raise ManifestError(f"report header must be {','.join(REPORT_HEADER)}", line=1)
        for row in reader:
            if not row:
                continue
            if len(row) != len(REPORT_HEADER):
                raise ManifestError(f"expected 5 fields, got {len(row)}", line=reader.line_num)
            if row[0] == AVERAGE_ROW and not include_average:
                continue
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ManifestError(str(exc), line=reader.line_num) from exc
            rows.append(FoldMetrics(row[0], *values))
    return rows

