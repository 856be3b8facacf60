"""Inter-rater agreement (nominal Krippendorff's alpha) and per-rater accuracy."""

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from camds.errors import AgreementError, ManifestError
from camds.metrics import DiagnosticMetrics, confusion, metrics

logger = logging.getLogger(__name__)

POSITIVE_LABEL = "abnormal"
GOLD_HEADER = ("item", "label")


@dataclass(frozen=True)
class RatingMatrix:
    """raters x items grid of nominal labels; ``None`` marks a missing rating."""

    raters: tuple[str, ...]
    items: tuple[str, ...]
    ratings: tuple[tuple[Optional[str], ...], ...]

    def __post_init__(self) -> None:
        if len(self.ratings) != len(self.raters):
            raise AgreementError(f"{len(self.raters)} raters but {len(self.ratings)} rows")
        for rater, row in zip(self.raters, self.ratings):
            if len(row) != len(self.items):
                raise AgreementError(
                    f"rater {rater} has {len(row)} ratings for {len(self.items)} items"
                )

    @classmethod
    def from_rows(
        cls, rows: Sequence[Sequence[Optional[str]]], raters: Optional[Sequence[str]] = None
    ) -> "RatingMatrix":
        width = len(rows[0]) if rows else 0
        if raters is None:
            raters = [f"r{i + 1}" for i in range(len(rows))]
        names = tuple(raters)
        return cls(names, tuple(f"i{j + 1}" for j in range(width)), tuple(tuple(r) for r in rows))

    @property
    def alphabet(self) -> tuple[str, ...]:
        return tuple(sorted({v for row in self.ratings for v in row if v is not None}))

    def item_values(self, j: int) -> list[str]:
        return [row[j] for row in self.ratings if row[j] is not None]


def load_ratings(path: Union[str, Path]) -> RatingMatrix:
    """CSV with a ``rater`` column followed by one column per item; empty cell = missing."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "rater":
            raise ManifestError("ratings header must start with 'rater'", line=1)
        items = tuple(header[1:])
        if not items:
            raise ManifestError("ratings file lists no items", line=1)
        raters: list[str] = []
        ratings: list[tuple[Optional[str], ...]] = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(
                    f"expected {len(header)} fields, got {len(row)}", line=reader.line_num
                )
            raters.append(row[0])
            ratings.append(tuple(v.strip() or None for v in row[1:]))
    return RatingMatrix(tuple(raters), items, tuple(ratings))


def load_gold(path: Union[str, Path]) -> dict[str, str]:
    gold: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != GOLD_HEADER:
            raise ManifestError(f"gold header must be {','.join(GOLD_HEADER)}", line=1)
        for row in reader:
            if not row:
                continue
            if len(row) != 2 or not row[1]:
                raise ManifestError("expected item,label", line=reader.line_num)
            if row[0] in gold:
                raise ManifestError(f"duplicate item {row[0]!r}", line=reader.line_num)
            gold[row[0]] = row[1]
    return gold


def coincidence_matrix(matrix: RatingMatrix) -> tuple[np.ndarray, tuple[str, ...]]:
    """o[c, k] = sum over items of (ordered c-k pairs within the item) / (m_u - 1).

    Only items with at least two ratings contribute.
    """
    alphabet = matrix.alphabet
    index = {label: i for i, label in enumerate(alphabet)}
    o = np.zeros((len(alphabet), len(alphabet)), dtype=np.float64)
    for j in range(len(matrix.items)):
        values = matrix.item_values(j)
        m = len(values)
        if m < 2:
            continue
        counts = Counter(values)
        for c, n_c in counts.items():
            for k, n_k in counts.items():
                pairs = n_c * (n_c - 1) if c == k else n_c * n_k
                o[index[c], index[k]] += pairs / (m - 1)
    return o, alphabet


def krippendorff_alpha(matrix: RatingMatrix) -> float:
    """Nominal alpha = 1 - (n - 1) * sum_{c!=k} o_ck / sum_{c!=k} n_c n_k.

    Raises AgreementError when no item has two ratings. Returns NaN when the
    expected disagreement is zero (every pairable value carries one label).
    """
    o, _ = coincidence_matrix(matrix)
    n_c = o.sum(axis=1)
    n = n_c.sum()
    if n == 0:
        raise AgreementError("no pairable items: every item has fewer than two ratings")
    off = ~np.eye(len(n_c), dtype=bool)
    observed = o[off].sum()
    expected = np.outer(n_c, n_c)[off].sum()
    if expected == 0:
        logger.warning("Krippendorff's alpha undefined: all pairable ratings share one label")
        return float("nan")
    return float(1.0 - (n - 1) * observed / expected)


def rater_metrics(
    matrix: RatingMatrix,
    gold: Mapping[str, str],
    positive: str = POSITIVE_LABEL,
) -> dict[str, DiagnosticMetrics]:
    """Sensitivity/specificity/accuracy/F1 of each rater against the gold labels.

    Only items rated by the rater and present in ``gold`` count.
    """
    results = {}
    for rater, row in zip(matrix.raters, matrix.ratings):
        pairs = [
            (float(v == positive), int(gold[item] == positive))
            for item, v in zip(matrix.items, row)
            if v is not None and item in gold
        ]
        if not pairs:
            raise AgreementError(f"rater {rater} shares no rated item with the gold labels")
        probs, labels = zip(*pairs)
        results[rater] = metrics(confusion(probs, labels))
    return results
