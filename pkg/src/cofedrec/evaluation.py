"""HR@K / NDCG@K under the sampled-100 and full-rank protocols."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataset import EvalCandidates, InteractionDataset
from .model import ScoreFunction


def _rank_of_first(scores: np.ndarray) -> int:
    # pessimistic: every other candidate scoring >= the held-out item ranks above it
    return 1 + int(np.count_nonzero(scores[1:] >= scores[0]))


def rank_test_item(V: np.ndarray, theta: ScoreFunction, candidates: Sequence[int], test_item: int) -> int:
    """1-based rank of ``test_item`` among ``candidates`` by predicted score.

    Candidates scoring equal to the test item count as ranked above it.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    hits = np.flatnonzero(cand == test_item)
    if len(hits) == 0:
        raise ValueError(f"test item {test_item} is not among the candidates")
    # logits are monotone in the predicted probability and avoid sigmoid saturation ties
    scores = theta.logits(V[cand])
    t = scores[hits[0]]
    others = np.delete(scores, hits[0])
    return 1 + int(np.count_nonzero(others >= t))


def hr_at_k(ranks, k: int = 10) -> float:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(r <= k))


def ndcg_at_k(ranks, k: int = 10) -> float:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks")
    gains = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(np.mean(gains))


def user_rank(
    dataset: InteractionDataset,
    candidates: EvalCandidates,
    user: int,
    V: np.ndarray,
    theta: ScoreFunction,
    split: str = "test",
) -> int:
    """Rank of the user's held-out ``split`` item under the candidate protocol.

    Full-rank mode ranks against every item except the user's training
    positives and the other held-out item.
    """
    if split == "test":
        target, other = dataset.test[user], (None if dataset.validation is None else dataset.validation[user])
    elif split == "validation":
        if dataset.validation is None:
            raise ValueError("dataset has no validation split")
        target, other = dataset.validation[user], dataset.test[user]
    else:
        raise ValueError(f"unknown split {split!r}")
    if candidates.mode == "sampled":
        cand = candidates.for_user(user, int(target))
        return _rank_of_first(theta.logits(V[cand]))
    scores = theta.logits(V)
    mask = np.ones(dataset.num_items, dtype=bool)
    mask[dataset.train[user]] = False
    if other is not None:
        mask[other] = False
    mask[target] = False
    return 1 + int(np.count_nonzero(scores[mask] >= scores[target]))


def evaluate(
    dataset: InteractionDataset,
    candidates: EvalCandidates,
    models: Sequence[tuple[np.ndarray, ScoreFunction]],
    split: str = "test",
    k: int = 10,
) -> dict:
    """HR@k and NDCG@k over all users; ``models[u]`` is user ``u``'s (V, theta)."""
    ranks = np.array([user_rank(dataset, candidates, u, V, th, split) for u, (V, th) in enumerate(models)])
    return {"hr": hr_at_k(ranks, k), "ndcg": ndcg_at_k(ranks, k), "ranks": ranks}
