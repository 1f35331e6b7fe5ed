"""Leave-one-subject-out evaluation, hidden-unit sweep, and zero-shot scoring."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from selfscreen import ffnn
from selfscreen.data import Dataset, Label
from selfscreen.embed import EmbeddingVector
from selfscreen.errors import DegenerateDataError, SelfscreenError, ValidationError
from selfscreen.metrics import (
    MetricsReport,
    Prediction,
    compute_metrics,
    confusion,
    metrics_from_counts,
    roc_auc_scores,
)
from selfscreen.sampling import upsample_minority  # noqa: F401  (re-exported)
from selfscreen.vlm import ZeroShotVerdict

logger = logging.getLogger(__name__)

DEFAULT_H_VALUES = (4, 8, 16, 32, 64, 128, 256)


@dataclass(frozen=True)
class FoldSpec:
    held_out_subject: str
    train_ids: frozenset[str]
    test_ids: frozenset[str]


def loso_folds(dataset: Dataset) -> list[FoldSpec]:
    """One fold per subject, ordered by subject id."""
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise ValidationError(f"LOSO needs at least 2 subjects, got {len(subjects)}")
    all_ids = frozenset(s.sample_id for s in dataset)
    folds = []
    for subj in subjects:
        test = frozenset(s.sample_id for s in dataset if s.subject_id == subj)
        folds.append(FoldSpec(subj, all_ids - test, test))
    return folds


def fold_seed(global_seed: int, subject_id: str) -> int:
    """Per-fold seed that does not depend on fold execution order."""
    digest = hashlib.sha256(f"{global_seed}\x00{subject_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class LosoResult:
    predictions: list[Prediction]
    metrics: MetricsReport
    skipped_folds: dict[str, str] = field(default_factory=dict)  # subject -> reason
    n_folds: int = 0
    best_epochs: dict[str, int] = field(default_factory=dict)


def _vector(embeddings: Mapping[str, EmbeddingVector | np.ndarray], sample_id: str) -> np.ndarray:
    v = embeddings[sample_id]
    return v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=np.float64)


def run_loso(
    dataset: Dataset,
    embeddings: Mapping[str, EmbeddingVector | np.ndarray],
    cfg: ffnn.TrainConfig,
    variant: str | None = None,
    hidden_units: int | None = None,
    workers: int = 1,
) -> LosoResult:
    """Train on all-but-one subject, predict the held-out subject, pool, score once.

    Folds whose training portion ends up single-class are skipped and listed
    in ``skipped_folds``. Predictions come back sorted by sample_id.
    """
    if variant is not None or hidden_units is not None:
        cfg = replace(cfg, variant=variant or cfg.variant, hidden_units=hidden_units or cfg.hidden_units)
    missing = [s.sample_id for s in dataset if s.sample_id not in embeddings]
    if missing:
        raise ValidationError(f"{len(missing)} sample(s) lack embeddings, e.g. {missing[:3]}")
    if len({s.label for s in dataset}) < 2:
        raise DegenerateDataError("LOSO needs both classes in the dataset")
    folds = loso_folds(dataset)
    samples = dataset.by_id()
    X_all = {sid: _vector(embeddings, sid) for sid in samples}

    def run_fold(fold: FoldSpec):
        train_ids = sorted(fold.train_ids)
        X = np.stack([X_all[i] for i in train_ids])
        y = [int(samples[i].label) for i in train_ids]
        groups = [samples[i].subject_id for i in train_ids]
        fold_cfg = replace(cfg, seed=fold_seed(cfg.seed, fold.held_out_subject))
        try:
            report = ffnn.train(X, y, fold_cfg, groups=groups)
        except DegenerateDataError as exc:
            logger.warning("skipping fold %s: %s", fold.held_out_subject, exc)
            return fold, None, str(exc)
        preds = []
        for sid in sorted(fold.test_ids):
            p, label = ffnn.screen_vector(report.params, X_all[sid])
            preds.append(Prediction(sid, samples[sid].label, p, label))
        return fold, report, preds

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_fold, folds))
    else:
        outcomes = [run_fold(f) for f in folds]

    predictions, skipped, best_epochs = [], {}, {}
    for fold, report, out in outcomes:
        if report is None:
            skipped[fold.held_out_subject] = out
        else:
            predictions.extend(out)
            best_epochs[fold.held_out_subject] = report.best_epoch
    if not predictions:
        raise DegenerateDataError("every LOSO fold was skipped")
    predictions.sort(key=lambda p: p.sample_id)
    return LosoResult(predictions, compute_metrics(predictions), skipped, len(folds), best_epochs)


@dataclass
class SweepResult:
    h: int
    metrics: MetricsReport | None
    n_folds_skipped: int = 0
    error: str | None = None
    predictions: list[Prediction] = field(default_factory=list, repr=False)


def sensitivity_sweep(
    dataset: Dataset,
    embeddings: Mapping[str, EmbeddingVector | np.ndarray],
    cfg: ffnn.TrainConfig,
    h_values: Sequence[int] = DEFAULT_H_VALUES,
    workers: int = 1,
) -> list[SweepResult]:
    """LOSO with the one-hidden-layer head (dropout after ReLU) for each ``h``."""
    h_values = list(h_values)
    if not h_values:
        raise ValidationError("h_values must not be empty")
    if any(int(h) < 1 for h in h_values):
        raise ValidationError(f"hidden units must be >= 1, got {h_values}")
    results = []
    for h in h_values:
        logger.info("sweep: h=%d", h)
        try:
            res = run_loso(dataset, embeddings, cfg, variant=ffnn.ALTERNATIVE, hidden_units=int(h), workers=workers)
        except SelfscreenError as exc:
            logger.error("sweep: h=%d failed: %s", h, exc)
            results.append(SweepResult(int(h), None, error=str(exc)))
            continue
        results.append(SweepResult(int(h), res.metrics, len(res.skipped_folds), predictions=res.predictions))
    return results


def zero_shot_eval(
    verdicts: Iterable[ZeroShotVerdict],
    labels: Dataset | Mapping[str, Label],
) -> tuple[list[Prediction], MetricsReport]:
    """Score VLM verdicts (anxiety/depression -> positive) against PHQ-4 labels.

    AUC is computed over the hard 0/1 verdicts and flagged as such.
    """
    truth = {s.sample_id: s.label for s in labels} if isinstance(labels, Dataset) else dict(labels)
    preds = []
    for v in verdicts:
        if v.sample_id not in truth:
            raise ValidationError(f"verdict for unknown sample_id {v.sample_id!r}")
        preds.append(Prediction(v.sample_id, Label(truth[v.sample_id]), float(int(v.label)), v.label))
    if not preds:
        raise ValidationError("no verdicts to evaluate")
    preds.sort(key=lambda p: p.sample_id)
    true = [int(p.true_label) for p in preds]
    counts = confusion(true, [int(p.predicted) for p in preds])
    auc = roc_auc_scores(true, [p.p_abnormal for p in preds]) if 0 < sum(true) < len(true) else None
    report = metrics_from_counts(counts, auc)
    return preds, replace(report, auc_from_hard_labels=True)
