import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cofedrec.dataset import RawRating, build_eval_candidates, build_splits
from cofedrec.evaluation import evaluate, hr_at_k, ndcg_at_k, rank_test_item, user_rank
from cofedrec.model import ScoreFunction


def identity_scores(values):
    """V and theta such that item i scores exactly values[i]."""
    V = np.asarray(values, dtype=float)[:, None]
    return V, ScoreFunction(np.array([1.0]), 0.0)


def test_unique_max_ranks_first():
    V, th = identity_scores([0.1, 0.9, 0.3])
    assert rank_test_item(V, th, [0, 1, 2], 1) == 1


def test_all_equal_is_pessimistic():
    V, th = identity_scores([0.0] * 100)
    assert rank_test_item(V, th, list(range(100)), 37) == 100


def test_missing_test_item():
    V, th = identity_scores([0.1, 0.2])
    with pytest.raises(ValueError):
        rank_test_item(V, th, [0], 1)


def test_rank_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        vals = np.round(rng.normal(size=10), 1)  # rounding creates ties
        V, th = identity_scores(vals)
        target = int(rng.integers(10))
        # stable sort by descending score with the target placed after its equals
        order = sorted(range(10), key=lambda i: (-vals[i], i == target))
        assert rank_test_item(V, th, list(range(10)), target) == order.index(target) + 1


def test_hr_and_ndcg_closed_forms():
    assert hr_at_k([1, 1, 1]) == 1.0
    assert hr_at_k([1, 11], 10) == 0.5
    assert ndcg_at_k([1]) == 1.0
    assert ndcg_at_k([10]) == pytest.approx(1 / math.log2(11), rel=1e-15)
    assert ndcg_at_k([10]) == pytest.approx(0.28906, abs=1e-5)
    with pytest.raises(ValueError):
        hr_at_k([])


@settings(max_examples=100)
@given(st.lists(st.integers(1, 100), min_size=1, max_size=50), st.integers(1, 20))
def test_metric_properties(ranks, k):
    assert ndcg_at_k(ranks, k) <= hr_at_k(ranks, k) + 1e-15
    assert hr_at_k(ranks, k) <= hr_at_k(ranks, k + 1)
    assert ndcg_at_k(ranks, k) <= ndcg_at_k(ranks, k + 1)
    worse = [r + 1 for r in ranks]
    assert hr_at_k(worse, k) <= hr_at_k(ranks, k)
    assert ndcg_at_k(worse, k) <= ndcg_at_k(ranks, k)


@pytest.fixture
def tiny():
    rng = np.random.default_rng(1)
    ratings = []
    for u in range(15):
        for t, i in enumerate(rng.choice(300, size=12, replace=False)):
            ratings.append(RawRating(u, int(i), 1.0, t))
    return build_splits(ratings)


def test_sampled_ranks_bounded(tiny):
    rng = np.random.default_rng(0)
    cand = build_eval_candidates(tiny, "sampled", rng)
    models = [(rng.normal(size=(tiny.num_items, 4)), ScoreFunction(rng.normal(size=4))) for _ in range(tiny.num_users)]
    out = evaluate(tiny, cand, models, "test")
    assert np.all((out["ranks"] >= 1) & (out["ranks"] <= 100))
    again = evaluate(tiny, cand, models, "test")
    assert out["hr"] == again["hr"] and out["ndcg"] == again["ndcg"]


def test_full_rank_never_beats_sampled(tiny):
    rng = np.random.default_rng(2)
    sampled = build_eval_candidates(tiny, "sampled", rng)
    full = build_eval_candidates(tiny, "full_rank")
    for _ in range(5):
        models = [(rng.normal(size=(tiny.num_items, 4)), ScoreFunction(rng.normal(size=4))) for _ in range(tiny.num_users)]
        for split in ("test", "validation"):
            rs = evaluate(tiny, sampled, models, split)["ranks"]
            rf = evaluate(tiny, full, models, split)["ranks"]
            assert np.all(rf >= rs)


def test_full_rank_excludes_train_and_other_heldout(tiny):
    u = 0
    scores = np.zeros(tiny.num_items)
    scores[tiny.train[u]] = 10.0
    scores[tiny.validation[u]] = 10.0
    scores[tiny.test[u]] = 5.0
    V, th = identity_scores(scores)
    full = build_eval_candidates(tiny, "full_rank")
    assert user_rank(tiny, full, u, V, th, "test") == 1
    # ties with the 0-scored pool are pessimistic
    scores[tiny.test[u]] = 0.0
    V, th = identity_scores(scores)
    assert user_rank(tiny, full, u, V, th, "test") == tiny.num_items - len(tiny.train[u]) - 1
