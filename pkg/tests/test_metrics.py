import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthgrow.errors import DataError
from depthgrow.metrics import (
    confusion_matrix,
    metrics_from_confusion,
    metrics_from_predictions,
)


def test_perfect_predictor():
    y = np.array([0, 1, 2, 2, 1, 0, 2])
    report = metrics_from_predictions(y, y, 3)
    assert report.accuracy == 1.0
    assert report.weighted_precision == report.weighted_recall == 1.0
    assert report.weighted_f1 == 1.0
    assert report.macro_f1 == 1.0
    cm = np.array(report.confusion)
    assert np.array_equal(cm, np.diag(np.bincount(y)))


def test_majority_class_predictor_on_staging_distribution():
    counts = (159, 92, 92, 125, 255)
    y_true = np.repeat(np.arange(5), counts)
    y_pred = np.full_like(y_true, 4)  # constant majority-class prediction
    report = metrics_from_predictions(y_true, y_pred, 5)
    assert report.sample_count == 723
    assert report.accuracy == pytest.approx(255 / 723)
    assert report.weighted_recall == pytest.approx(report.accuracy)
    assert len(report.warnings) == 4  # four classes never predicted


def test_hand_computed_three_class_matrix():
    # rows = true, columns = predicted
    cm = np.array([[2, 1, 0],
                   [0, 3, 0],
                   [1, 0, 3]])
    report = metrics_from_confusion(cm)
    assert report.sample_count == 10
    assert report.accuracy == pytest.approx(8 / 10)
    assert report.precision == pytest.approx((2 / 3, 3 / 4, 1.0))
    assert report.recall == pytest.approx((2 / 3, 1.0, 3 / 4))
    assert report.f1 == pytest.approx((2 / 3, 6 / 7, 6 / 7))
    # support-weighted: (3*2/3 + 3*3/4 + 4*1)/10 etc.
    assert report.weighted_precision == pytest.approx(0.825)
    assert report.weighted_recall == pytest.approx(0.8)
    assert report.weighted_f1 == pytest.approx((3 * (2 / 3) + 7 * (6 / 7)) / 10)
    assert report.macro_precision == pytest.approx((2 / 3 + 3 / 4 + 1) / 3)


def test_empty_split_rejected():
    with pytest.raises(DataError):
        metrics_from_predictions(np.array([]), np.array([]), 3)
    with pytest.raises(DataError):
        metrics_from_confusion(np.zeros((3, 3), dtype=int))


def test_out_of_range_labels_rejected():
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 1], num_classes=3)


def test_zero_support_class_flagged():
    report = metrics_from_predictions([0, 0, 2], [0, 2, 2], 3)
    assert report.recall[1] == 0.0
    assert any("zero support" in w for w in report.warnings)


confusion_matrices = st.integers(2, 6).flatmap(
    lambda k: st.lists(
        st.lists(st.integers(0, 20), min_size=k, max_size=k),
        min_size=k, max_size=k))


@settings(max_examples=60, deadline=None)
@given(confusion_matrices)
def test_weighted_recall_equals_accuracy(rows):
    cm = np.array(rows, dtype=np.int64)
    if cm.sum() == 0:
        cm[0, 0] = 1
    report = metrics_from_confusion(cm)
    assert report.weighted_recall == pytest.approx(report.accuracy, abs=1e-12)
    assert 0.0 <= report.accuracy <= 1.0
    for series in (report.precision, report.recall, report.f1):
        assert all(0.0 <= v <= 1.0 for v in series)
    assert int(cm.sum()) == report.sample_count
    assert np.array(report.confusion).sum() == report.sample_count


@settings(max_examples=40, deadline=None)
@given(confusion_matrices, st.randoms(use_true_random=False))
def test_class_permutation_invariance(rows, rnd):
    cm = np.array(rows, dtype=np.int64)
    if cm.sum() == 0:
        cm[0, 0] = 1
    k = cm.shape[0]
    perm = list(range(k))
    rnd.shuffle(perm)
    permuted = cm[np.ix_(perm, perm)]
    a = metrics_from_confusion(cm)
    b = metrics_from_confusion(permuted)
    assert b.accuracy == pytest.approx(a.accuracy)
    assert b.weighted_f1 == pytest.approx(a.weighted_f1)
    assert b.macro_precision == pytest.approx(a.macro_precision)
    for i, j in enumerate(perm):
        assert b.precision[i] == pytest.approx(a.precision[j])
        assert b.recall[i] == pytest.approx(a.recall[j])


@settings(max_examples=40, deadline=None)
@given(confusion_matrices)
def test_metrics_recomputable_from_emitted_confusion(rows):
    cm = np.array(rows, dtype=np.int64)
    if cm.sum() == 0:
        cm[0, 0] = 1
    first = metrics_from_confusion(cm)
    second = metrics_from_confusion(np.array(first.confusion))
    assert second.to_dict() == first.to_dict()


def test_render_table_and_csv():
    report = metrics_from_predictions([0, 1, 1], [0, 1, 0], 2,
                                      class_names=("open", "fused"))
    table = report.render_table()
    assert "open" in table and "weighted avg" in table
    csv_text = report.confusion_csv()
    assert csv_text.splitlines()[0] == "true\\pred,open,fused"
