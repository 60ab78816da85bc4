import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from errors import UndefinedMetricError
from services.data_service import Bag
from services.eval_service import (
    NORMAL,
    SEEN,
    UNSEEN,
    ScoredInstances,
    auc_pr,
    auc_roc,
    open_set_report,
    plot_curves,
    pr_points,
    rank_normalize,
    roc_points,
    scored_from_bags,
    write_curves,
    write_report,
)


def _pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def _step_ap(scores, labels):
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        picked = scores >= t
        tp = int((labels[picked] == 1).sum())
        recall = tp / labels.sum()
        precision = tp / picked.sum()
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


scored_sets = st.lists(
    st.tuples(st.integers(0, 8).map(lambda v: v / 4), st.integers(0, 1)), min_size=2, max_size=200
)


# -----------------------------------
# Metrics against brute force
# -----------------------------------
@settings(max_examples=1000)
@given(scored_sets)
def test_auc_roc_matches_pairwise_count(pairs):
    scores = np.array([s for s, _ in pairs])
    labels = np.array([y for _, y in pairs])
    assume(0 < labels.sum() < len(labels))
    assert auc_roc(ScoredInstances(scores, labels)) == pytest.approx(_pairwise_auc(scores, labels), abs=1e-12)


@settings(max_examples=1000)
@given(scored_sets)
def test_auc_pr_matches_step_sum(pairs):
    scores = np.array([s for s, _ in pairs])
    labels = np.array([y for _, y in pairs])
    assume(0 < labels.sum() < len(labels))
    assert auc_pr(ScoredInstances(scores, labels)) == pytest.approx(_step_ap(scores, labels), abs=1e-12)


def test_perfect_separation_and_ties():
    perfect = ScoredInstances([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert auc_roc(perfect) == 1.0 and auc_pr(perfect) == 1.0
    assert auc_roc(ScoredInstances([0.5] * 4, [0, 1, 0, 1])) == 0.5


def test_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc_roc(ScoredInstances([0.1, 0.2], [0, 0]))
    with pytest.raises(UndefinedMetricError):
        auc_pr(ScoredInstances([0.1, 0.2], [0, 0]))
    assert auc_pr(ScoredInstances([0.1, 0.2], [1, 1])) == 1.0


def test_monotone_transform_and_flip(rng):
    scores = rng.normal(size=50)
    labels = (rng.uniform(size=50) < 0.4).astype(int)
    labels[:2] = [0, 1]
    base = auc_roc(ScoredInstances(scores, labels))
    assert auc_roc(ScoredInstances(np.exp(3 * scores), labels)) == pytest.approx(base, abs=1e-12)
    assert auc_roc(ScoredInstances(-scores, labels)) == pytest.approx(1.0 - base, abs=1e-12)


def test_curve_endpoints(rng):
    scored = ScoredInstances(rng.uniform(size=30), np.r_[np.zeros(20), np.ones(10)])
    roc = roc_points(scored)
    assert list(roc.columns) == ["threshold", "x", "y"]
    assert (roc.x.iloc[0], roc.y.iloc[0]) == (0.0, 0.0)
    assert (roc.x.iloc[-1], roc.y.iloc[-1]) == (1.0, 1.0)
    pr = pr_points(scored)
    assert pr.threshold.iloc[-1] == np.inf
    assert (pr.x.iloc[-1], pr.y.iloc[-1]) == (0.0, 1.0)


def test_rank_normalize_ties():
    assert rank_normalize([3.0, 1.0, 3.0, 2.0]) == pytest.approx([0.875, 0.25, 0.875, 0.5])


# -----------------------------------
# Open-set report
# -----------------------------------
def _report_bags():
    return [
        Bag("n0", np.zeros((4, 2)), 0, np.zeros(4)),
        Bag("n1", np.zeros((3, 2)), 0),
        Bag("s0", np.zeros((4, 2)), 1, np.array([0, 1, 1, 0]), "class_0"),
        Bag("u0", np.zeros((3, 2)), 1, np.array([1, 0, 0]), "class_1"),
        Bag("x0", np.zeros((3, 2)), 1, None, "class_1"),
    ]


def _scores():
    return {
        "n0": np.array([0.1, 0.2, 0.1, 0.3]),
        "n1": np.array([0.2, 0.4, 0.1]),
        "s0": np.array([0.2, 0.9, 0.8, 0.1]),
        "u0": np.array([0.45, 0.2, 0.1]),
        "x0": np.array([0.5, 0.5, 0.5]),
    }


def test_scored_from_bags_tags_groups():
    scored = scored_from_bags(_report_bags(), _scores(), ["class_0"])
    assert len(scored) == 14
    assert scored.n_pos == 3
    assert list(scored.groups[scored.labels == 1]) == [SEEN, SEEN, UNSEEN]
    assert set(scored.groups[scored.labels == 0]) == {NORMAL}


def test_report_groups(tmp_path):
    report = open_set_report(scored_from_bags(_report_bags(), _scores(), ["class_0"]))
    assert report.metric("seen") == 1.0
    assert report.metric("unseen") == pytest.approx(1.0)
    assert report.summary.unseen.n_pos == 1 and report.summary.unseen.n_neg == 11
    assert {"overall_roc", "unseen_pr", "seen_roc"} <= set(report.curves)

    path = write_report(report, tmp_path)
    assert json.loads(path.read_text(encoding="utf-8"))["overall"]["n_pos"] == 3
    assert len(write_curves(report, tmp_path / "curves")) == 6
    assert all(p.exists() for p in plot_curves(report, tmp_path / "plots"))


def test_closed_set_report_omits_unseen():
    bags = [b for b in _report_bags() if b.anomaly_class != "class_1"]
    report = open_set_report(scored_from_bags(bags, _scores(), ["class_0"]))
    assert report.summary.unseen is None
    assert report.metric("unseen") is None
    assert any("unseen" in note for note in report.summary.notes)
    assert "unseen_roc" not in report.curves


def test_no_ground_truth_at_all():
    bags = [Bag("x0", np.zeros((3, 2)), 1, None, "class_1")]
    with pytest.raises(UndefinedMetricError):
        scored_from_bags(bags, _scores(), [])
