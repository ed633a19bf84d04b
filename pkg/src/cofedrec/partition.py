"""Category-restricted client similarity, elbow split and model aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


@dataclass
class SimilarityScores:
    client_ids: np.ndarray
    scores: np.ndarray
    core_id: int
    category: int = -1

    def __post_init__(self):
        self.client_ids = np.asarray(self.client_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.client_ids.shape != self.scores.shape:
            raise ValueError("one score per client expected")


@dataclass
class GroupSplit:
    similar: list[int]
    dissimilar: list[int]
    elbow_rank: int
    sorted_ids: list[int]
    sorted_scores: list[float]
    degenerate: bool = False
    distances: list[float] = field(default_factory=list, repr=False)

    def record(self, **extra) -> dict:
        out = {
            "similar_size": len(self.similar),
            "dissimilar_size": len(self.dissimilar),
            "elbow_rank": self.elbow_rank,
            "ids": [int(c) for c in self.sorted_ids],
            "scores": [float(s) for s in self.sorted_scores],
        }
        out.update(extra)
        return out


def row_cosines(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cosine over the last axis; rows with zero norm give 0."""
    dots = np.einsum("...j,...j->...", A, B)
    norms = np.linalg.norm(A, axis=-1) * np.linalg.norm(B, axis=-1)
    out = np.zeros_like(dots)
    np.divide(dots, norms, out=out, where=norms > 0)
    return out


def similarity_scores(
    core: np.ndarray,
    participants: Sequence[tuple[int, np.ndarray]],
    category_items: Sequence[int],
    core_id: int = -1,
    category: int = -1,
) -> SimilarityScores:
    """Sum of per-item cosine similarities to the core model over one category."""
    items = np.asarray(category_items, dtype=np.int64)
    if len(items) == 0:
        raise ValueError("empty item category")
    core_rows = np.asarray(core)[items]
    ids = np.array([cid for cid, _ in participants], dtype=np.int64)
    scores = np.array([row_cosines(core_rows, np.asarray(V)[items]).sum() for _, V in participants])
    return SimilarityScores(ids, scores, core_id, category)


def _chord_distances(sorted_scores: np.ndarray) -> np.ndarray:
    n = len(sorted_scores)
    lo, hi = sorted_scores.min(), sorted_scores.max()
    x = np.arange(n) / (n - 1)
    y = (sorted_scores - lo) / (hi - lo)
    # chord runs from (0, y[0]) to (1, y[-1]); distance via the 2-D cross product
    dx, dy = 1.0, y[-1] - y[0]
    cross = np.abs(dx * (y - y[0]) - dy * x)
    return cross / np.hypot(dx, dy)


def elbow_split(scores: SimilarityScores) -> GroupSplit:
    """Split participants at the knee of their descending similarity curve.

    Scores are sorted descending (ties: lower client id first) and placed at
    ``(rank / (n - 1), min-max normalised score)``. The elbow is the rank
    farthest from the chord joining the first and last points (ties: lowest
    rank). Clients ranked at or above the elbow, plus the core client, form the
    similar group. Constant scores put everyone in the similar group.
    """
    ids, s = scores.client_ids, scores.scores
    n = len(ids)
    order = np.lexsort((ids, -s))
    sid, ss = ids[order], s[order]
    if n < 2 or ss[0] == ss[-1]:
        return GroupSplit(
            [int(c) for c in np.sort(ids)], [], n - 1, sid.tolist(), ss.tolist(), degenerate=n < 2
        )
    dist = _chord_distances(ss)
    elbow = int(np.argmax(dist))
    similar = set(int(c) for c in sid[: elbow + 1])
    if scores.core_id in set(ids.tolist()):
        similar.add(int(scores.core_id))
    dissimilar = sorted(int(c) for c in sid if int(c) not in similar)
    return GroupSplit(sorted(similar), dissimilar, elbow, sid.tolist(), ss.tolist(), False, dist.tolist())


def _ordered(members) -> list[np.ndarray]:
    if isinstance(members, Mapping):
        return [members[k] for k in sorted(members)]
    return list(members)


def group_aggregate(members: Sequence[np.ndarray] | Mapping[int, np.ndarray]) -> np.ndarray:
    """Element-wise mean, summed sequentially in the given (or ascending-id) order."""
    mats = _ordered(members)
    if not mats:
        raise ValueError("cannot aggregate an empty group")
    acc = np.array(mats[0], dtype=np.float64, copy=True)
    for V in mats[1:]:
        if V.shape != acc.shape:
            raise ValueError("member matrices differ in shape")
        acc += V
    acc /= len(mats)
    return acc


def global_aggregate(participants: Sequence[np.ndarray] | Mapping[int, np.ndarray]) -> np.ndarray:
    return group_aggregate(participants)
