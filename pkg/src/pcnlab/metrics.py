"""Type-2 metrics over probe records.

AUROC2 is the probability that a correct response carries a strictly
higher confidence margin than an incorrect one, with half credit for
ties (Mann-Whitney; equals the trapezoidal ROC area). Degenerate samples
(all-correct or all-incorrect) report None rather than a clamped 0.5,
so broken runs stay visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricsReport:
    n: int
    n_correct: int
    n_incorrect: int
    accuracy: float
    auroc2: float | None  # None when either outcome class is empty


def _split(records):
    margins = np.asarray([r.margin for r in records], dtype=np.float64)
    correct = np.asarray([bool(r.correct) for r in records])
    return margins, correct


def auroc2_from_arrays(margins: np.ndarray, correct: np.ndarray) -> float | None:
    """Rank formulation of the Mann-Whitney statistic (ties share rank)."""
    margins = np.asarray(margins, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    n_pos = int(correct.sum())
    n_neg = int((~correct).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(margins)
    u = ranks[correct].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc2(records) -> float | None:
    return auroc2_from_arrays(*_split(records))


def accuracy(records) -> float:
    if len(records) == 0:
        raise ValueError("accuracy over an empty record list")
    return float(np.mean([bool(r.correct) for r in records]))


def report(records) -> MetricsReport:
    margins, correct = _split(records)
    n_correct = int(correct.sum())
    return MetricsReport(
        n=len(records),
        n_correct=n_correct,
        n_incorrect=len(records) - n_correct,
        accuracy=float(correct.mean()),
        auroc2=auroc2_from_arrays(margins, correct),
    )


def pearson(xs, ys) -> float | None:
    """Sample Pearson correlation; None on n < 3 or zero variance."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError(f"pearson: length mismatch {xs.shape} vs {ys.shape}")
    if xs.size < 3:
        return None
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)
