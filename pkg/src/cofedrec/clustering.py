"""K-Means over item-embedding rows, producing the item membership vector."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ItemMembership:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError("labels must lie in [0, k)")

    def __len__(self):
        return len(self.labels)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_index", "label"])
            for i, lab in enumerate(self.labels):
                w.writerow([i, int(lab)])


@dataclass
class KMeansResult:
    membership: ItemMembership
    centroids: np.ndarray
    objective: float
    n_iter: int
    history: list[float] = field(default_factory=list)


def category_items(membership: ItemMembership, k: int) -> np.ndarray:
    if not 0 <= k < membership.k:
        raise IndexError(f"category {k} out of range [0, {membership.k})")
    return np.flatnonzero(membership.labels == k)


def _sq_distances(X: np.ndarray, sq_norms: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = sq_norms[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X: np.ndarray, sq_norms: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(X, sq_norms, X[chosen])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a centre already; pick uniformly
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_distances(X, sq_norms, X[[nxt]])[:, 0])
    return X[chosen].copy()


def kmeans(
    rows: np.ndarray,
    K: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-6,
    init: np.ndarray | None = None,
) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding (or explicit ``init`` centroids).

    Points go to the nearest centroid in Euclidean distance, ties to the
    lowest cluster id. Iteration stops once no centroid moves by ``tol`` or
    more, or after ``max_iters`` updates. A cluster left empty is reseeded
    with the point farthest from its current centroid. ``objective`` is the
    within-cluster sum of squared distances of the returned assignment;
    ``history`` records it after every assignment step.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("rows must be a 2-D matrix")
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K={K} must lie in [1, {n}]")
    if not np.all(np.isfinite(X)):
        raise ValueError("rows contain non-finite values")

    sq_norms = np.einsum("ij,ij->i", X, X)
    if init is not None:
        C = np.array(init, dtype=np.float64, copy=True)
        if C.shape != (K, X.shape[1]):
            raise ValueError("init must have shape (K, d)")
    else:
        C = _kmeans_pp(X, sq_norms, K, rng)

    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels = np.argmin(_sq_distances(X, sq_norms, C), axis=1)
        history.append(_objective(X, labels, C))
        new = _update(X, labels, C)
        shift = float(np.max(np.linalg.norm(new - C, axis=1)))
        C = new
        if shift < tol:
            break

    labels = np.argmin(_sq_distances(X, sq_norms, C), axis=1)
    objective = _objective(X, labels, C)
    history.append(objective)
    return KMeansResult(ItemMembership(labels, K), C, objective, n_iter, history)


def _objective(X: np.ndarray, labels: np.ndarray, C: np.ndarray) -> float:
    diff = X - C[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _update(X: np.ndarray, labels: np.ndarray, C: np.ndarray) -> np.ndarray:
    K = C.shape[0]
    new = np.empty_like(C)
    counts = np.bincount(labels, minlength=K)
    for k in range(K):
        if counts[k]:
            new[k] = X[labels == k].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        labels = labels.copy()
        for k in empty:
            filled = counts > 0
            dist = np.einsum("ij,ij->i", X - new[labels], X - new[labels])
            # never steal the last member of a cluster
            dist[counts[labels] <= 1] = -1.0
            far = int(np.argmax(dist))
            counts[labels[far]] -= 1
            donor = labels[far]
            labels[far] = k
            counts[k] = 1
            new[k] = X[far]
            if filled[donor] and counts[donor]:
                new[donor] = X[labels == donor].mean(axis=0)
    return new
