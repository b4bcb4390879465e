"""Ranking quality measures: AP, RR, P@1 and nDCG@10, plus aggregation.

Every function takes the binary relevance labels of one ranked candidate
list, best candidate first.  Queries without a single positive candidate
are not evaluable; the per-query functions fall back to 0 by convention,
while `aggregate` excludes such queries from the means and reports how
many were skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


class NoPositives(Exception):
    """Signals a query that cannot contribute to a mean (no positive labels)."""


def _as_binary(labels: Sequence[int]) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError("a ranking needs a non-empty 1-D label vector")
    if not np.isin(arr, (0, 1)).all():
        raise DataError("relevance labels must be 0 or 1")
    return arr.astype(np.int64)


def average_precision(labels: Sequence[int]) -> float:
    """Mean over positive positions p of (positives in top p) / p.

    Raises NoPositives when the query has no relevant candidate, so callers
    can exclude it from a dataset mean.
    """
    r = _as_binary(labels)
    hits = np.flatnonzero(r)
    if hits.size == 0:
        raise NoPositives
    ranks = hits + 1
    precisions = np.arange(1, hits.size + 1) / ranks
    return float(precisions.mean())


def reciprocal_rank(labels: Sequence[int]) -> float:
    """1 / rank of the first relevant candidate; 0 when there is none."""
    r = _as_binary(labels)
    hits = np.flatnonzero(r)
    return 0.0 if hits.size == 0 else 1.0 / float(hits[0] + 1)


def precision_at_1(labels: Sequence[int]) -> float:
    """Relevance of the top-ranked candidate."""
    return float(_as_binary(labels)[0])


def ndcg_at_10(labels: Sequence[int]) -> float:
    """Binary-gain DCG@10 over its ideal value, discount log2(rank + 1)."""
    r = _as_binary(labels)
    discounts = 1.0 / np.log2(np.arange(2, r.size + 2))

    def dcg(rel: np.ndarray) -> float:
        top = rel[:10]
        return float((top * discounts[: top.size]).sum())

    ideal = dcg(np.sort(r)[::-1])
    return 0.0 if ideal == 0.0 else dcg(r) / ideal


def rank_labels(order: Sequence[int], labels: Sequence[int]) -> list[int]:
    """Labels rearranged into ranked order (order holds candidate indices)."""
    labels = list(labels)
    if sorted(order) != list(range(len(labels))):
        raise DataError("ranking is not a permutation of the candidate indices")
    return [labels[i] for i in order]


@dataclass(frozen=True)
class MetricSummary:
    map: float
    mrr: float
    p_at_1: float
    ndcg_at_10: float
    evaluated: int
    skipped: int

    def as_dict(self) -> dict[str, float]:
        return {
            "map": self.map, "mrr": self.mrr, "p_at_1": self.p_at_1,
            "ndcg_at_10": self.ndcg_at_10,
        }


def aggregate(ranked_labels: Iterable[Sequence[int]]) -> MetricSummary:
    """Dataset-level means over evaluable queries.

    Queries without any positive candidate are skipped entirely (counted in
    `skipped`); raising them would otherwise pin MAP/MRR to indefensible 0s.
    """
    ap, rr, p1, ndcg = [], [], [], []
    skipped = 0
    for labels in ranked_labels:
        try:
            ap.append(average_precision(labels))
        except NoPositives:
            skipped += 1
            continue
        rr.append(reciprocal_rank(labels))
        p1.append(precision_at_1(labels))
        ndcg.append(ndcg_at_10(labels))
    if not ap:
        raise DataError("no evaluable queries: every query lacks a positive label")
    return MetricSummary(
        map=float(np.mean(ap)), mrr=float(np.mean(rr)), p_at_1=float(np.mean(p1)),
        ndcg_at_10=float(np.mean(ndcg)), evaluated=len(ap), skipped=skipped,
    )
