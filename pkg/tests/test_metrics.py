import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from oracles import (
    brute_average_precision,
    brute_confusion,
    brute_dice,
    brute_hd95,
    brute_iou,
    brute_roc_auc,
)
from sscxr import metrics


def _binary_case(seed, n_max=30, tie_levels=None):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.random(n) if tie_levels is None else rng.integers(0, tie_levels, n) / tie_levels
    return y, s


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_confusion_rates_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    y, _ = _binary_case(seed)
    p = rng.integers(0, 2, y.size)
    tp, fp, tn, fn = brute_confusion(y, p)
    r = metrics.confusion_rates(y, p)
    assert r.tpr == tp / (tp + fn) and r.fpr == fp / (fp + tn) and r.fnr == fn / (tp + fn)
    assert r.tpr + r.fnr == 1.0
    assert r.acc == 100.0 * ((tp + tn) / y.size)


@given(seed=st.integers(0, 2**32 - 1), ties=st.sampled_from([None, 3, 5]))
@settings(max_examples=200, deadline=None)
def test_auc_matches_oracles(seed, ties):
    y, s = _binary_case(seed, tie_levels=ties)
    assert abs(metrics.roc_auc(y, s) - brute_roc_auc(y, s)) <= 1e-9
    assert abs(metrics.pr_auc(y, s) - brute_average_precision(y, s)) <= 1e-9
    assert abs(metrics.roc_auc(y, s) - roc_auc_score(y, s)) <= 1e-9
    assert abs(metrics.pr_auc(y, s) - average_precision_score(y, s)) <= 1e-9


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_roc_auc_invariant_under_monotone_transform(seed):
    y, s = _binary_case(seed)
    assert metrics.roc_auc(y, s) == pytest.approx(metrics.roc_auc(y, np.exp(3 * s) - 7), abs=1e-12)


def test_auc_edge_cases():
    assert metrics.roc_auc([0, 1], [0.1, 0.9]) == 1.0
    assert metrics.roc_auc([0, 1], [0.5, 0.5]) == 0.5
    with pytest.raises(metrics.MetricError):
        metrics.roc_auc([1, 1], [0.1, 0.2])
    with pytest.raises(metrics.MetricError):
        metrics.confusion_rates([1, 1], [1, 0])


def _mask_pair(seed, size=None):
    rng = np.random.default_rng(seed)
    h = size or int(rng.integers(3, 12))
    w = size or int(rng.integers(3, 12))
    a = (rng.random((h, w)) < rng.random()).astype(np.uint8)
    b = (rng.random((h, w)) < rng.random()).astype(np.uint8)
    return a, b


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_overlap_metrics_match_brute_force(seed):
    a, b = _mask_pair(seed)
    d, j = metrics.dice(a, b), metrics.iou(a, b)
    assert d == brute_dice(a, b)
    assert j == brute_iou(a, b)
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=150, deadline=None)
def test_hd95_matches_brute_force(seed):
    a, b = _mask_pair(seed)
    if not a.any() or not b.any():
        with pytest.raises(metrics.MetricError):
            metrics.hd95(a, b)
        return
    assert metrics.hd95(a, b) == pytest.approx(brute_hd95(a, b), abs=1e-12)


def test_hd95_known_values():
    a = np.zeros((10, 10), np.uint8)
    a[2:5, 2:5] = 1
    assert metrics.hd95(a, a) == 0.0
    b = np.roll(a, 3, axis=1)
    assert metrics.hd95(a, b) == pytest.approx(3.0)


def test_mask_validation():
    with pytest.raises(metrics.MetricError, match="shape"):
        metrics.dice(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(metrics.MetricError, match="binary"):
        metrics.iou(np.full((2, 2), 2), np.zeros((2, 2)))
    assert metrics.dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_classification_report_binary_and_absent_class(tmp_path):
    y = np.array([0, 0, 1, 1])
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]])
    rep = metrics.classification_report(y, probs, cohort="a")
    assert rep.values == {"tpr": 1.0, "fpr": 0.0, "fnr": 0.0, "auc_pr": 1.0, "auc_roc": 1.0, "acc": 100.0}
    only0 = metrics.classification_report(np.zeros(3, int), probs[:3], cohort="b")
    assert only0.per_class[1]["tpr"] is None
    jp, cp = rep.write(tmp_path)
    assert json.loads(jp.read_text())["class_1.auc_roc"] == 1.0
    header, row = cp.read_text().splitlines()
    assert header.split(",")[:3] == ["task", "cohort", "n_samples"]


def test_multiclass_report_is_macro_mean():
    rng = np.random.default_rng(0)
    y = np.arange(12) % 3
    probs = rng.dirichlet(np.ones(3), 12)
    rep = metrics.classification_report(y, probs)
    want = np.mean([rep.per_class[c]["auc_roc"] for c in range(3)])
    assert rep.values["auc_roc"] == pytest.approx(want)


def test_segmentation_report_excludes_empty_hd95():
    a = np.zeros((6, 6), np.uint8)
    b = a.copy()
    b[1:3, 1:3] = 1
    rep = metrics.segmentation_report([b, a], [b, a])
    assert rep.values["dice"] == 1.0 and rep.values["hd95"] == 0.0
    assert rep.notes["hd95_excluded"] == 1


def test_predictions_round_trip(tmp_path):
    probs = np.array([[0.25, 0.75], [0.5, 0.5]])
    path = metrics.write_predictions(["a.png", "b.png"], [1, 0], probs, tmp_path / "p.csv")
    paths, labels, back = metrics.read_predictions(path)
    assert paths == ["a.png", "b.png"] and labels.tolist() == [1, 0]
    np.testing.assert_array_equal(back, probs)


def test_softmax_rows_sum_to_one():
    p = metrics.softmax(np.array([[1000.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(p.sum(1), 1.0)
    assert p[1, 0] == 0.5
