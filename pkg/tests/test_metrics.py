import numpy as np
import pytest
from hypothesis import given, strategies as st

from selfscreen.data import Label
from selfscreen.errors import DegenerateDataError, ValidationError
from selfscreen.metrics import (
    ConfusionCounts,
    Prediction,
    compute_metrics,
    metrics_from_counts,
    roc_auc,
    roc_auc_scores,
)
from selfscreen.report import pct
from selfscreen.sampling import upsample_minority

from oracles import brute_force_metrics, pair_counting_auc, table_row_confusions, trapezoid_roc_auc


def preds_from(true, scores, predicted=None):
    if predicted is None:
        predicted = [int(s > 0.5) for s in scores]
    return [Prediction(f"s{i}", Label(t), float(s), Label(p)) for i, (t, s, p) in enumerate(zip(true, scores, predicted))]


def test_gpt4o_row_confusion_is_unique():
    assert table_row_confusions(61.8, 51.2, 56.0, 77.6) == [(21, 13, 20, 93)]


def test_gpt4o_row_from_counts():
    m = metrics_from_counts(ConfusionCounts(tp=21, fp=13, fn=20, tn=93))
    assert [pct(v) for v in (m.precision, m.recall, m.f1, m.accuracy)] == ["61.8", "51.2", "56.0", "77.6"]


def test_all_correct():
    m = compute_metrics(preds_from([1, 0, 1, 0], [0.9, 0.1, 0.8, 0.3]))
    assert (m.precision, m.recall, m.f1, m.accuracy, m.auc) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_no_positive_predictions(caplog):
    m = compute_metrics(preds_from([1, 0, 1], [0.2, 0.1, 0.3]))
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert "precision set to 0" in caplog.text


def test_empty_predictions():
    with pytest.raises(ValidationError):
        compute_metrics([])


def test_auc_hand_case():
    # pairs: 0.9>0.8, 0.9>0.2, 0.4<0.8, 0.4>0.2 -> 3 of 4
    assert roc_auc(preds_from([1, 1, 0, 0], [0.9, 0.4, 0.8, 0.2])) == 0.75


def test_auc_all_ties_and_separated():
    assert roc_auc_scores([1, 0, 1, 0], [0.3] * 4) == 0.5
    assert roc_auc_scores([1, 0, 1, 0], [0.9, 0.1, 0.8, 0.2]) == 1.0


def test_auc_single_class():
    with pytest.raises(ValidationError):
        roc_auc_scores([1, 1], [0.2, 0.4])
    assert compute_metrics(preds_from([1, 1], [0.9, 0.8])).auc is None


@st.composite
def labelled_scores(draw, min_size=2):
    n = draw(st.integers(min_size, 40))
    true = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    # coarse grid to force ties
    scores = draw(st.lists(st.integers(0, 10).map(lambda v: v / 10), min_size=n, max_size=n))
    return true, scores


@given(labelled_scores())
def test_auc_matches_oracles(data):
    true, scores = data
    if not 0 < sum(true) < len(true):
        return
    auc = roc_auc_scores(true, scores)
    pos = [s for t, s in zip(true, scores) if t]
    neg = [s for t, s in zip(true, scores) if not t]
    assert auc == pair_counting_auc(pos, neg)
    assert abs(auc - trapezoid_roc_auc(true, scores)) <= 1e-12


@given(labelled_scores(min_size=1))
def test_metrics_match_brute_force(data):
    true, scores = data
    m = compute_metrics(preds_from(true, scores), warn=False)
    ref = brute_force_metrics(true, [int(s > 0.5) for s in scores])
    c = m.counts
    assert (c.tp, c.fp, c.fn, c.tn) == (ref["tp"], ref["fp"], ref["fn"], ref["tn"])
    for k in ("precision", "recall", "f1", "accuracy"):
        assert getattr(m, k) == pytest.approx(ref[k], abs=1e-12)
    assert c.total == len(true)


@given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_fixing_a_false_negative_never_hurts(tp, fp, fn, tn):
    if fn == 0:
        return
    a = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn), warn=False)
    b = metrics_from_counts(ConfusionCounts(tp + 1, fp, fn - 1, tn), warn=False)
    assert b.recall >= a.recall and b.f1 >= a.f1 and b.accuracy >= a.accuracy


def test_f1_is_harmonic_mean():
    m = metrics_from_counts(ConfusionCounts(7, 3, 5, 20))
    assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-15)


# -- upsampling --------------------------------------------------------------

def _entries(n_neg, n_pos):
    return [(f"n{i}", Label.NEGATIVE) for i in range(n_neg)] + [(f"p{i}", Label.POSITIVE) for i in range(n_pos)]


def test_upsample_paper_counts():
    out = upsample_minority(_entries(106, 41), seed=0)
    labels = [lbl for _, lbl in out]
    assert labels.count(Label.NEGATIVE) == labels.count(Label.POSITIVE) == 106


def test_upsample_balanced_is_unchanged_in_counts():
    out = upsample_minority(_entries(10, 10), seed=1)
    assert sorted(out) == sorted(_entries(10, 10))


def test_upsample_deterministic():
    assert upsample_minority(_entries(20, 3), 5) == upsample_minority(_entries(20, 3), 5)
    assert upsample_minority(_entries(20, 3), 5) != upsample_minority(_entries(20, 3), 6)


def test_upsample_single_class():
    with pytest.raises(DegenerateDataError):
        upsample_minority(_entries(5, 0), 0)


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_upsample_properties(n_neg, n_pos, seed):
    original = _entries(n_neg, n_pos)
    out = upsample_minority(original, seed)
    labels = [lbl for _, lbl in out]
    assert labels.count(Label.NEGATIVE) == labels.count(Label.POSITIVE) == max(n_neg, n_pos)
    assert set(original) <= set(out)
    assert all(out.count(e) >= 1 for e in original)
    majority = Label.NEGATIVE if n_neg >= n_pos else Label.POSITIVE
    assert all(out.count(e) == 1 for e in original if e[1] is majority)
