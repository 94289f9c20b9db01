import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctpe.errors import UndefinedMetricError
from ctpe.metrics import (
    ConfusionMatrix,
    accuracy,
    confusion,
    percent,
    roc_auc,
    sensitivity,
    specificity,
)


def mann_whitney_auc(scores, labels):
    """Brute-force pair-counting oracle: (concordant + 0.5*tied) / (P*N)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    concordant = sum(1 for p in pos for n in neg if p > n)
    tied = sum(1 for p in pos for n in neg if p == n)
    return (concordant + 0.5 * tied) / (len(pos) * len(neg))


class TestConfusion:
    def test_basic_tally(self):
        cm = confusion([0.9, 0.2], [1, 0], 0.5)
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (1, 1, 0, 0)

    def test_all_below_threshold_with_positive_labels(self):
        cm = confusion([0.1, 0.2, 0.3], [1, 1, 1], 0.5)
        assert cm.fn == 3 and cm.tp == 0

    def test_boundary_score_counts_positive(self):
        cm = confusion([0.5], [1], 0.5)
        assert cm.tp == 1 and cm.fn == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion([0.5, 0.6], [1], 0.5)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            confusion([0.5], [2], 0.5)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(tp=-1, tn=0, fp=0, fn=0)


class TestRatios:
    def test_reported_twenty_case_row(self):
        # the unique integer matrix on 20 cases that rounds to 85/33/94
        cm = ConfusionMatrix(tp=1, tn=16, fp=1, fn=2)
        assert percent(accuracy(cm)) == 85
        assert percent(sensitivity(cm)) == 33
        assert percent(specificity(cm)) == 94

    def test_perfect_classifier(self):
        cm = ConfusionMatrix(tp=5, tn=5, fp=0, fn=0)
        assert accuracy(cm) == sensitivity(cm) == specificity(cm) == 1.0

    def test_everything_wrong(self):
        cm = ConfusionMatrix(tp=0, tn=0, fp=5, fn=5)
        assert accuracy(cm) == 0.0

    def test_zero_denominators_raise(self):
        with pytest.raises(UndefinedMetricError):
            sensitivity(ConfusionMatrix(tp=0, tn=5, fp=5, fn=0))
        with pytest.raises(UndefinedMetricError):
            specificity(ConfusionMatrix(tp=5, tn=0, fp=0, fn=5))

    def test_accuracy_is_prevalence_weighted_mix(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            tp, tn, fp, fn = rng.integers(1, 50, size=4)
            cm = ConfusionMatrix(int(tp), int(tn), int(fp), int(fn))
            prevalence = (tp + fn) / cm.total
            mixed = prevalence * sensitivity(cm) + (1 - prevalence) * specificity(cm)
            assert accuracy(cm) == pytest.approx(mixed, abs=1e-12)

    def test_percent_rounds_halves_up(self):
        assert percent(0.845) == 85
        assert percent(0.335) == 34
        assert percent(0.333) == 33
        assert percent(1.0) == 100


class TestRocAuc:
    def test_perfect_separation(self):
        curve = roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert curve.auc == 1.0

    def test_all_tied_is_chance(self):
        curve = roc_auc([0.5, 0.5, 0.5, 0.5], [1, 1, 0, 0])
        assert curve.auc == 0.5
        assert curve.points == ((0.0, 0.0), (1.0, 1.0))

    def test_three_of_four_pairs_concordant(self):
        curve = roc_auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
        assert curve.auc == 0.75

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.5, 0.6], [1, 1])

    def test_endpoints_and_monotonicity(self):
        rng = np.random.default_rng(5)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[0], labels[1] = 0, 1
        curve = roc_auc(scores, labels)
        assert curve.points[0] == (0.0, 0.0)
        assert curve.points[-1] == (1.0, 1.0)
        fprs = [p[0] for p in curve.points]
        tprs = [p[1] for p in curve.points]
        assert fprs == sorted(fprs)
        assert tprs == sorted(tprs)

    @given(st.data())
    @settings(max_examples=150, deadline=None)
    def test_matches_mann_whitney(self, data):
        n = data.draw(st.integers(4, 60))
        # coarse grid forces plenty of ties
        scores = data.draw(st.lists(st.sampled_from([i / 10 for i in range(11)]), min_size=n, max_size=n))
        labels = data.draw(st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n))
        if len(set(labels)) < 2:
            labels[0], labels[1] = 0, 1
        assert roc_auc(scores, labels).auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(9)
        scores = rng.random(50)
        labels = rng.integers(0, 2, 50)
        labels[:2] = (0, 1)
        direct = roc_auc(scores, labels).auc
        squashed = roc_auc(np.tanh(3 * scores) + 7, labels).auc
        assert direct == pytest.approx(squashed, abs=1e-12)

    def test_label_reversal_flips_auc(self):
        rng = np.random.default_rng(13)
        scores = np.unique(rng.random(40))  # unique: no ties
        labels = rng.integers(0, 2, len(scores))
        labels[:2] = (0, 1)
        a = roc_auc(scores, labels).auc
        b = roc_auc(scores, 1 - labels).auc
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_points_export_format(self):
        text = roc_auc([0.9, 0.1], [1, 0]).as_text()
        lines = text.strip().split("\n")
        assert len(lines) == 3
        assert all(len(line.split("\t")) == 2 for line in lines)
