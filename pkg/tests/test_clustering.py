import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cofedrec.clustering import ItemMembership, category_items, kmeans

_ASSIGNMENTS = {}


def all_assignments(n, K):
    key = (n, K)
    if key not in _ASSIGNMENTS:
        _ASSIGNMENTS[key] = np.array(list(itertools.product(range(K), repeat=n)), dtype=np.int8)
    return _ASSIGNMENTS[key]


def exhaustive_optimum(X, K):
    """Minimum within-cluster sum of squares over every labelling of the rows."""
    A = all_assignments(len(X), K)
    sq = np.einsum("ij,ij->i", X, X)
    best_obj, best_lab = np.inf, None
    for start in range(0, len(A), 50_000):
        chunk = A[start : start + 50_000]
        onehot = (chunk[:, :, None] == np.arange(K)).astype(np.float64)  # (a, n, K)
        counts = onehot.sum(axis=1)
        sums = np.einsum("ank,nd->akd", onehot, X)
        safe = np.where(counts > 0, counts, 1.0)
        obj = sq.sum() - np.einsum("akd,akd->ak", sums, sums).__truediv__(safe).sum(axis=1)
        j = int(np.argmin(obj))
        if obj[j] < best_obj:
            best_obj, best_lab = float(obj[j]), chunk[j].astype(np.int64)
    return best_obj, best_lab


def same_partition(a, b):
    mapping = {}
    for x, y in zip(a.tolist(), b.tolist()):
        if mapping.setdefault(x, y) != y:
            return False
    return len(set(mapping.values())) == len(mapping)


def test_kmeans_matches_exhaustive_optimum():
    rng = np.random.default_rng(0)
    for _ in range(200):
        K = int(rng.integers(1, 4))
        n = int(rng.integers(max(K, 2), 13))
        X = rng.normal(size=(n, 2))
        opt, lab = exhaustive_optimum(X, K)
        init = np.array([X[lab == k].mean(axis=0) if np.any(lab == k) else X[0] for k in range(K)])
        res = kmeans(X, K, rng, init=init)
        assert abs(res.objective - opt) <= 1e-9 * max(1.0, opt)
        assert same_partition(res.membership.labels, lab)


def test_single_cluster_closed_form():
    X = np.random.default_rng(1).normal(size=(20, 3))
    res = kmeans(X, 1, np.random.default_rng(0))
    assert np.all(res.membership.labels == 0)
    np.testing.assert_allclose(res.centroids[0], X.mean(axis=0), rtol=1e-12)
    assert res.objective == pytest.approx(X.var(axis=0).sum() * 20, rel=1e-12)


def test_one_cluster_per_point():
    X = np.random.default_rng(2).normal(size=(7, 2))
    res = kmeans(X, 7, np.random.default_rng(0))
    assert res.objective == pytest.approx(0.0, abs=1e-20)
    assert sorted(res.membership.labels.tolist()) == list(range(7))


def test_two_blobs_found():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(0, 0.1, (6, 2)), rng.normal(10, 0.1, (6, 2))])
    res = kmeans(X, 2, rng)
    assert same_partition(res.membership.labels, np.repeat([0, 1], 6))
    assert res.objective == pytest.approx(exhaustive_optimum(X, 2)[0], rel=1e-9)


def test_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4, rng)
    with pytest.raises(ValueError):
        kmeans(np.array([[np.nan, 0.0], [1.0, 1.0]]), 1, rng)


def test_identical_rows_do_not_break_seeding():
    res = kmeans(np.ones((5, 2)), 3, np.random.default_rng(0))
    # coincident centroids: the lowest-id tie rule may leave clusters empty
    assert res.objective == 0.0
    assert res.membership.sizes().sum() == 5 and np.all(np.isfinite(res.centroids))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_lloyd_properties(seed, K):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    res = kmeans(X, K, np.random.default_rng(seed))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * (1 + h[:-1]))
    if res.n_iter < 100:
        d = ((X[:, None, :] - res.centroids[None]) ** 2).sum(axis=2)
        own = d[np.arange(30), res.membership.labels]
        assert np.all(own <= d.min(axis=1) + 1e-9)
    again = kmeans(X, K, np.random.default_rng(seed))
    assert np.array_equal(again.membership.labels, res.membership.labels)


def test_category_items():
    m = ItemMembership(np.array([0, 1, 0]), 3)
    assert category_items(m, 0).tolist() == [0, 2]
    assert category_items(m, 2).tolist() == []
    with pytest.raises(IndexError):
        category_items(m, 3)
    parts = np.concatenate([category_items(m, k) for k in range(3)])
    assert sorted(parts.tolist()) == [0, 1, 2]


def test_membership_csv(tmp_path):
    ItemMembership(np.array([2, 0]), 3).to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines() == ["item_index,label", "0,2", "1,0"]
