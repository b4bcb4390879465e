"""Ranking metrics against brute-force direct-formula oracles."""

import math

import numpy as np
import pytest

from ctrank import metrics as M
from ctrank.errors import DataError


# -- independent oracles (pure Python, direct definitions) -------------------

def ap_oracle(labels) -> float:
    hits = 0
    precisions = []
    for rank, rel in enumerate(labels, start=1):
        if rel:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        raise ZeroDivisionError
    return sum(precisions) / len(precisions)


def rr_oracle(labels) -> float:
    for rank, rel in enumerate(labels, start=1):
        if rel:
            return 1.0 / rank
    return 0.0


def ndcg10_oracle(labels) -> float:
    def dcg(rels):
        return sum(rel / math.log2(rank + 1)
                   for rank, rel in enumerate(rels[:10], start=1))

    ideal = dcg(sorted(labels, reverse=True))
    return 0.0 if ideal == 0 else dcg(list(labels)) / ideal


def random_labels(rng, allow_empty=False):
    n = int(rng.integers(1, 25))
    labels = (rng.random(n) < 0.3).astype(int)
    if not allow_empty and labels.sum() == 0:
        labels[rng.integers(0, n)] = 1
    return labels.tolist()


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert M.average_precision([1, 1, 0, 0]) == 1.0

    def test_single_positive_at_rank_two(self):
        assert M.average_precision([0, 1, 0]) == 0.5

    def test_matches_oracle_on_random_rankings(self, rng):
        for _ in range(300):
            labels = random_labels(rng)
            assert abs(M.average_precision(labels) - ap_oracle(labels)) < 1e-9

    def test_no_positive_signals_skip(self):
        with pytest.raises(M.NoPositives):
            M.average_precision([0, 0, 0])


class TestPointMetrics:
    def test_first_positive_at_rank_one(self):
        assert M.reciprocal_rank([1, 0, 0]) == 1.0
        assert M.precision_at_1([1, 0, 0]) == 1.0

    def test_hand_computed_ndcg(self):
        labels = [0, 0, 1, 0, 0, 0, 0, 0, 0, 0]
        assert abs(M.ndcg_at_10(labels) - 0.5) < 1e-12

    def test_zero_positive_conventions(self):
        assert M.reciprocal_rank([0, 0]) == 0.0
        assert M.precision_at_1([0, 0]) == 0.0
        assert M.ndcg_at_10([0, 0]) == 0.0

    def test_matches_oracles_on_random_rankings(self, rng):
        for _ in range(300):
            labels = random_labels(rng, allow_empty=True)
            assert abs(M.reciprocal_rank(labels) - rr_oracle(labels)) < 1e-9
            assert abs(M.ndcg_at_10(labels) - ndcg10_oracle(labels)) < 1e-9
            assert M.precision_at_1(labels) == float(labels[0])

    def test_positions_beyond_ten_do_not_count(self):
        labels = [0] * 10 + [1]
        assert M.ndcg_at_10(labels) == 0.0
        assert M.reciprocal_rank(labels) == pytest.approx(1 / 11)


class TestProperties:
    def test_all_metrics_in_unit_interval(self, rng):
        for _ in range(200):
            labels = random_labels(rng)
            for value in (M.average_precision(labels), M.reciprocal_rank(labels),
                          M.precision_at_1(labels), M.ndcg_at_10(labels)):
                assert 0.0 <= value <= 1.0

    def test_promoting_a_positive_never_hurts(self, rng):
        for _ in range(200):
            labels = random_labels(rng)
            hits = [i for i, rel in enumerate(labels) if rel and i > 0
                    and labels[i - 1] == 0]
            if not hits:
                continue
            i = hits[int(rng.integers(0, len(hits)))]
            promoted = list(labels)
            promoted[i - 1], promoted[i] = promoted[i], promoted[i - 1]
            assert M.average_precision(promoted) >= M.average_precision(labels)
            assert M.reciprocal_rank(promoted) >= M.reciprocal_rank(labels)
            assert M.ndcg_at_10(promoted) >= M.ndcg_at_10(labels)

    def test_rank_labels_permutation_check(self):
        assert M.rank_labels([2, 0, 1], [1, 0, 0]) == [0, 1, 0]
        with pytest.raises(DataError):
            M.rank_labels([0, 0, 1], [1, 0, 0])


class TestAggregate:
    def test_single_query(self):
        summary = M.aggregate([[1, 0]])
        assert summary.map == 1.0 and summary.evaluated == 1 and summary.skipped == 0

    def test_mean_of_two_queries(self):
        summary = M.aggregate([[1, 0, 0], [0, 1, 0]])
        assert summary.map == pytest.approx(0.75)

    def test_skip_accounting(self):
        summary = M.aggregate([[1, 0], [0, 1], [0, 0]])
        assert summary.evaluated == 2 and summary.skipped == 1
        assert summary.map == pytest.approx((1.0 + 0.5) / 2)

    def test_all_skipped_is_an_error(self):
        with pytest.raises(DataError):
            M.aggregate([[0], [0, 0]])
