"""Ranking metrics with binary relevance: NDCG@k, hit@k, MRR@k."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

from .errors import ValidationError


@dataclass(frozen=True)
class RankedPrediction:
    candidates: tuple
    relevant: frozenset

    def __init__(self, candidates: Iterable[Hashable], relevant: Iterable[Hashable]):
        cands = tuple(candidates)
        if len(set(cands)) != len(cands):
            raise ValidationError("ranked candidates must be distinct")
        object.__setattr__(self, "candidates", cands)
        object.__setattr__(self, "relevant", frozenset(relevant))

    def ratings(self, k: int) -> list[int]:
        return [1 if c in self.relevant else 0 for c in self.candidates[:k]]

    def first_relevant_rank(self, k: int) -> int | None:
        """1-based position of the first relevant candidate within the top k."""
        for i, c in enumerate(self.candidates[:k], start=1):
            if c in self.relevant:
                return i
        return None


def _check(prediction: RankedPrediction, k: int) -> None:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not prediction.relevant:
        raise ValidationError("relevance set is empty")


def dcg(ratings: Sequence[int]) -> float:
    return sum(r / math.log2(i + 1) for i, r in enumerate(ratings, start=1))


def ndcg_at_k(prediction: RankedPrediction, k: int) -> float:
    """DCG of the top k over the DCG of min(|REL|, k) relevant items placed first."""
    _check(prediction, k)
    ideal = dcg([1] * min(len(prediction.relevant), k))
    return dcg(prediction.ratings(k)) / ideal


def hit_at_k(prediction: RankedPrediction, k: int) -> int:
    _check(prediction, k)
    return int(prediction.first_relevant_rank(k) is not None)


def any_item_ndcg_at_k(prediction: RankedPrediction, k: int) -> float:
    """Gain of the best-placed relevant item, ``1/log2(rank+1)``; 0 on a miss.

    Used for any-item tasks, where finding one relevant product is the goal.
    Unlike :func:`ndcg_at_k` it cannot drop when the relevance set grows.
    """
    _check(prediction, k)
    rank = prediction.first_relevant_rank(k)
    return 0.0 if rank is None else 1.0 / math.log2(rank + 1)


def reciprocal_rank(prediction: RankedPrediction, k: int) -> float:
    _check(prediction, k)
    rank = prediction.first_relevant_rank(k)
    return 0.0 if rank is None else 1.0 / rank


def mrr_at_k(predictions: Sequence[RankedPrediction], k: int) -> float:
    if not predictions:
        raise ValidationError("no predictions to average")
    return sum(reciprocal_rank(p, k) for p in predictions) / len(predictions)
