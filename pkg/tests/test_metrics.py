import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssc.metrics import average_precision, instance_map


def oracle_ap(scores, labels):
    """Independent rank-and-average implementation (pairwise comparisons)."""
    s = len(scores)
    positives = [i for i in range(s) if labels[i]]
    if not positives:
        return None
    precisions = []
    for p in positives:
        # rank of p under descending score, ties toward lower index
        rank = sum(1 for j in range(s)
                   if scores[j] > scores[p] or (scores[j] == scores[p] and j <= p))
        hits = sum(1 for j in positives
                   if scores[j] > scores[p] or (scores[j] == scores[p] and j <= p))
        precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


class TestAveragePrecision:
    def test_all_positives_first_gives_one(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([1, 1, 0, 0])
        assert average_precision(scores, labels) == 1.0

    def test_single_positive_ranked_second(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([0, 1, 0, 0])
        assert average_precision(scores, labels) == 0.5

    def test_no_positives_returns_none(self):
        assert average_precision(np.ones(3), np.zeros(3)) is None

    def test_ties_break_toward_lower_index(self):
        scores = np.array([0.5, 0.5])
        assert average_precision(scores, np.array([1, 0])) == 1.0
        assert average_precision(scores, np.array([0, 1])) == 0.5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            average_precision(np.ones(3), np.ones(4))

    def test_matches_oracle_on_50_random_cases(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            s = int(rng.integers(2, 15))
            scores = rng.normal(size=s)
            labels = rng.integers(0, 2, size=s)
            if labels.sum() == 0:
                labels[int(rng.integers(s))] = 1
            got = average_precision(scores, labels)
            want = oracle_ap(list(scores), list(labels))
            assert got == pytest.approx(want, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.1, 5.0), st.floats(-3.0, 3.0))
    def test_invariant_under_monotone_transform(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=8)
        labels = rng.integers(0, 2, size=8)
        labels[0] = 1
        base = average_precision(scores, labels)
        transformed = average_precision(scale * scores + shift, labels)
        assert base == pytest.approx(transformed, abs=1e-12)


class TestInstanceMap:
    def test_mean_of_per_image_aps(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.9]])
        labels = np.array([[1, 0], [1, 0]])
        m, skipped = instance_map(scores, labels)
        assert m == pytest.approx((1.0 + 0.5) / 2)
        assert skipped == 0

    def test_zero_positive_images_skipped_and_counted(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.9]])
        labels = np.array([[1, 0], [0, 0]])
        m, skipped = instance_map(scores, labels)
        assert m == 1.0
        assert skipped == 1

    def test_all_empty_rejected(self):
        with pytest.raises(ValueError):
            instance_map(np.ones((2, 3)), np.zeros((2, 3)))
