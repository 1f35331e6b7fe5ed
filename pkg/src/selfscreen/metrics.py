"""Binary classification metrics over pooled predictions."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from selfscreen.data import Label
from selfscreen.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    true_label: Label
    p_abnormal: float
    predicted: Label

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "true_label": Label(self.true_label).text,
            "p_abnormal": float(self.p_abnormal),
            "predicted": Label(self.predicted).text,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Prediction":
        return cls(rec["sample_id"], Label.parse(rec["true_label"]), float(rec["p_abnormal"]),
                   Label.parse(rec["predicted"]))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    auc: float | None  # None when only one true class is present
    accuracy: float
    counts: ConfusionCounts
    auc_from_hard_labels: bool = False

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "accuracy": self.accuracy,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
            "tn": self.counts.tn,
            "auc_from_hard_labels": self.auc_from_hard_labels,
        }


def confusion(true: Sequence[int], predicted: Sequence[int]) -> ConfusionCounts:
    t = np.asarray(true, dtype=int)
    p = np.asarray(predicted, dtype=int)
    return ConfusionCounts(
        tp=int(np.sum((t == 1) & (p == 1))),
        fp=int(np.sum((t == 0) & (p == 1))),
        fn=int(np.sum((t == 1) & (p == 0))),
        tn=int(np.sum((t == 0) & (p == 0))),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics_from_counts(c: ConfusionCounts, auc: float | None = None, warn: bool = True) -> MetricsReport:
    if c.total == 0:
        raise ValidationError("no predictions to score")
    if warn and c.tp + c.fp == 0:
        logger.warning("no positive predictions: precision set to 0")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)  # == 2PR/(P+R), and 0 when P+R == 0
    return MetricsReport(precision, recall, f1, auc, (c.tp + c.tn) / c.total, c)


def f1_score(true: Sequence[int], predicted: Sequence[int]) -> float:
    c = confusion(true, predicted)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def roc_auc_scores(true: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counting one half."""
    t = np.asarray(true, dtype=int)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[t == 1], s[t == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("AUC is undefined unless both true classes are present")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (pos.size * neg.size))


def roc_auc(preds: Sequence[Prediction]) -> float:
    return roc_auc_scores([int(p.true_label) for p in preds], [p.p_abnormal for p in preds])


def compute_metrics(preds: Sequence[Prediction], warn: bool = True) -> MetricsReport:
    if not preds:
        raise ValidationError("compute_metrics needs at least one prediction")
    true = [int(p.true_label) for p in preds]
    counts = confusion(true, [int(p.predicted) for p in preds])
    auc = None
    if 0 < sum(true) < len(true):
        auc = roc_auc(preds)
    elif warn:
        logger.warning("only one true class present: AUC undefined")
    return metrics_from_counts(counts, auc, warn=warn)
