import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import auc_pairs, pearson_of_ranks
from patientgraph.metrics import MetricError, auc_roc, evaluate, roc_curve, spearman, threshold_metrics


def random_case(rng, n_max=200):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    # coarse grid forces plenty of ties
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    return scores, labels


# -- AUC ---------------------------------------------------------------------

def test_auc_hand_case():
    assert auc_roc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
    assert auc_pairs([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75


def test_auc_trivial_cases():
    assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_roc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(MetricError):
        auc_roc([0.1, 0.2], [1, 1])


def test_auc_equals_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(100):
        scores, labels = random_case(rng)
        assert auc_roc(scores, labels) == auc_pairs(scores, labels)


def test_auc_monotone_transform_and_reversal():
    rng = np.random.default_rng(1)
    scores = rng.random(150)
    labels = rng.random(150) < 0.3
    base = auc_roc(scores, labels)
    assert auc_roc(np.exp(3 * scores) - 7, labels) == base
    assert auc_roc(-scores, labels) == pytest.approx(1 - base, abs=1e-15)


def test_roc_points_shape():
    points, _, n_pos, n_neg = roc_curve([0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0])
    assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)
    assert points == [(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]
    assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(points, points[1:]))


# -- threshold metrics -------------------------------------------------------

def test_threshold_hand_case():
    # TP=3, FP=1, FN=2, TN=4
    scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1, 0.1, 0.1]
    labels = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
    m = threshold_metrics(scores, labels)
    assert (m.tp, m.fp, m.fn, m.tn) == (3, 1, 2, 4)
    assert m.precision == 0.75 and m.recall == 0.6
    assert m.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35, abs=1e-15)
    assert m.accuracy == 0.7


def test_threshold_all_correct_and_no_positive_predictions():
    m = threshold_metrics([0.9, 0.1], [1, 0])
    assert m.accuracy == 1.0 and m.f1 == 1.0
    m = threshold_metrics([0.1, 0.2, 0.3], [1, 0, 1])
    assert m.precision == 0.0 and not m.precision_defined
    assert m.recall == 0.0 and m.recall_defined
    assert m.f1 == 0.0


def test_tie_at_threshold_is_positive():
    m = threshold_metrics([0.5], [1])
    assert m.tp == 1


@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=50), st.randoms())
def test_confusion_permutation_invariant(pairs, rnd):
    s, y = zip(*pairs)
    a = threshold_metrics(s, y)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    s2, y2 = zip(*shuffled)
    b = threshold_metrics(s2, y2)
    assert (a.tp, a.fp, a.tn, a.fn) == (b.tp, b.fp, b.tn, b.fn)
    assert a.tp + a.fp + a.tn + a.fn == len(pairs)


# -- Spearman ----------------------------------------------------------------

def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    assert pearson_of_ranks([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-15)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)


def test_spearman_errors():
    with pytest.raises(MetricError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(MetricError):
        spearman([1], [1])
    with pytest.raises(MetricError):
        spearman([1, 2], [1, 2, 3])


def test_spearman_matches_oracle_with_ties():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(3, 60))
        x, y = rng.integers(0, 6, n), rng.integers(0, 6, n)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert spearman(x, y) == pytest.approx(pearson_of_ranks(list(x), list(y)), abs=1e-12)


# -- report ------------------------------------------------------------------

def test_report_export(tmp_path):
    rng = np.random.default_rng(3)
    scores, labels = rng.random(40), rng.random(40) < 0.4
    labels[:2] = [True, False]
    report = evaluate(scores, labels, rng.random(40), rng.random(40))
    report.write_json(tmp_path / "m.json")
    report.write_roc_csv(tmp_path / "roc.csv")
    doc = json.loads((tmp_path / "m.json").read_text())
    for key in ("auc_roc", "accuracy", "precision", "recall", "f1", "confusion", "spearman_rho", "n_evaluated"):
        assert key in doc
    assert sum(doc["confusion"].values()) == 40
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "fpr,tpr" and len(lines) == len(report.roc_points) + 1
    assert report.auc_roc == auc_pairs(scores, labels)


def test_report_spearman_none_when_undefined():
    report = evaluate([0.2, 0.8], [0, 1], [0.5, 0.5], [0.1, 0.3])
    assert report.spearman_rho is None
