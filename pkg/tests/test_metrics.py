import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shopalign.errors import ValidationError
from shopalign.metrics import (RankedPrediction, any_item_ndcg_at_k, hit_at_k, mrr_at_k, ndcg_at_k,
                               reciprocal_rank)


def brute_ndcg(cands, rel, k):
    dcg = sum(1.0 / math.log2(i + 2) for i, c in enumerate(cands[:k]) if c in rel)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(rel), k)))
    return dcg / ideal


def brute_hit(cands, rel, k):
    return int(len(set(cands[:k]) & set(rel)) > 0)


def brute_rr(cands, rel, k):
    ranks = [i + 1 for i, c in enumerate(cands[:k]) if c in rel]
    return 1.0 / min(ranks) if ranks else 0.0


def test_ndcg_examples():
    assert ndcg_at_k(RankedPrediction(["a", "b"], {"a"}), 10) == 1.0
    assert ndcg_at_k(RankedPrediction(["a", "b", "c"], {"b"}), 10) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k(RankedPrediction(["a", "b", "c"], {"z"}), 10) == 0.0


def test_hit_boundaries():
    p = RankedPrediction(["a", "b", "c", "d"], {"c"})
    assert hit_at_k(p, 3) == 1
    assert hit_at_k(p, 2) == 0


def test_mrr_examples():
    assert mrr_at_k([RankedPrediction(["a"], {"a"}), RankedPrediction(["b", "a"], {"b"})], 5) == 1.0
    preds = [RankedPrediction(["x", "a"], {"a"}), RankedPrediction(["x", "y", "z", "a"], {"a"})]
    assert mrr_at_k(preds, 5) == pytest.approx(0.375)


def test_errors():
    with pytest.raises(ValidationError):
        ndcg_at_k(RankedPrediction(["a"], set()), 10)
    with pytest.raises(ValidationError):
        hit_at_k(RankedPrediction(["a"], {"a"}), 0)
    with pytest.raises(ValidationError):
        mrr_at_k([], 5)
    with pytest.raises(ValidationError):
        RankedPrediction(["a", "a"], {"a"})


def test_random_instances_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 11))
        cands = list(rng.permutation(20)[:n])
        rel = set(rng.choice(20, size=int(rng.integers(1, 6)), replace=False).tolist())
        k = int(rng.integers(1, 12))
        p = RankedPrediction(cands, rel)
        assert ndcg_at_k(p, k) == pytest.approx(brute_ndcg(cands, rel, k), abs=1e-12)
        assert hit_at_k(p, k) == brute_hit(cands, rel, k)
        assert reciprocal_rank(p, k) == pytest.approx(brute_rr(cands, rel, k), abs=1e-12)


ranked = st.lists(st.integers(0, 30), min_size=1, max_size=10, unique=True)


@given(ranked, st.sets(st.integers(0, 30), min_size=1, max_size=5), st.integers(1, 12))
def test_metric_ranges(cands, rel, k):
    p = RankedPrediction(cands, rel)
    for v in (ndcg_at_k(p, k), any_item_ndcg_at_k(p, k), reciprocal_rank(p, k)):
        assert 0.0 <= v <= 1.0 + 1e-12
    # a hit is exactly a non-zero reciprocal rank
    assert hit_at_k(p, k) == int(reciprocal_rank(p, k) > 0)


@given(ranked, st.sets(st.integers(0, 30), min_size=1, max_size=5), st.integers(1, 11))
def test_hit_monotone_in_k(cands, rel, k):
    p = RankedPrediction(cands, rel)
    assert hit_at_k(p, k) <= hit_at_k(p, k + 1)


@given(ranked, st.sets(st.integers(0, 30), min_size=1, max_size=5), st.integers(0, 30), st.integers(1, 12))
def test_any_item_ndcg_never_drops_when_relevance_grows(cands, rel, extra, k):
    small = any_item_ndcg_at_k(RankedPrediction(cands, rel), k)
    assert any_item_ndcg_at_k(RankedPrediction(cands, rel | {extra}), k) >= small


@given(ranked, st.integers(1, 12))
def test_single_relevant_any_item_equals_ndcg(cands, k):
    p = RankedPrediction(cands, {cands[-1]})
    assert any_item_ndcg_at_k(p, k) == pytest.approx(ndcg_at_k(p, k), abs=1e-12)
