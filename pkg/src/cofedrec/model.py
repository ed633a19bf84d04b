"""Per-client recommendation model and local training.

A client owns an item-embedding matrix ``V`` (``|I| x d``, shared with the
server) and a private affine score function ``theta = (w, b)``; the predicted
interaction probability of item ``i`` is ``sigmoid(w . V[i] + b)``.

The local objective of one batch is the summed binary cross-entropy plus
``lam`` times an item-structure term computed on the whole matrix:

* ``supcontrast`` -- supervised contrastive loss over item clusters,
* ``item_s`` -- mean negative cosine similarity to same-cluster items,
* ``none`` -- no extra term.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

EPS = 1e-12
_LOG_EPS = -np.log(EPS)

SCL_VARIANTS = ("supcontrast", "item_s", "none")


class DivergenceError(FloatingPointError):
    """Local training produced a non-finite parameter."""


@dataclass
class ScoreFunction:
    weights: np.ndarray
    bias: float = 0.0

    def copy(self) -> "ScoreFunction":
        return ScoreFunction(self.weights.copy(), float(self.bias))

    def logits(self, rows: np.ndarray) -> np.ndarray:
        return rows @ self.weights + self.bias


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.005
    tau: float = 0.1
    scl_variant: str = "supcontrast"
    learning_rate: float = 0.1
    local_epochs: int = 1
    # embedding steps use learning_rate * embedding_lr_scale
    embedding_lr_scale: float = 1.0
    # above this catalogue size the contrastive term uses a per-batch item subsample
    scl_max_items: int = 4096

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.embedding_lr_scale <= 0:
            raise ValueError("embedding_lr_scale must be positive")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.scl_variant not in SCL_VARIANTS:
            raise ValueError(f"scl_variant must be one of {SCL_VARIANTS}")
        if self.scl_max_items < 2:
            raise ValueError("scl_max_items must be >= 2")

    def with_(self, **changes) -> "LossConfig":
        return replace(self, **changes)


def init_embeddings(num_items: int, dim: int, rng: np.random.Generator, std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=(num_items, dim))


def init_score_function(dim: int, rng: np.random.Generator, std: float = 0.01) -> ScoreFunction:
    return ScoreFunction(rng.normal(0.0, std, size=dim), 0.0)


def _sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict(score_fn: ScoreFunction, item_row: np.ndarray) -> float:
    row = np.asarray(item_row, dtype=np.float64)
    if not (np.all(np.isfinite(row)) and np.all(np.isfinite(score_fn.weights)) and np.isfinite(score_fn.bias)):
        raise ValueError("non-finite input to predict")
    return float(_sigmoid(np.dot(score_fn.weights, row) + score_fn.bias))


def predict_rows(score_fn: ScoreFunction, rows: np.ndarray) -> np.ndarray:
    return _sigmoid(score_fn.logits(rows))


def bce_loss(predictions, labels) -> float:
    """Summed binary cross-entropy with probabilities clamped to [EPS, 1 - EPS]."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum())


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and d loss / d logit; the clamp caps each term at -log(EPS)."""
    # -log sigmoid(z) for positives, -log(1 - sigmoid(z)) for negatives
    signed = np.where(y > 0.5, -z, z)
    terms = np.logaddexp(0.0, signed)
    clamped = terms > _LOG_EPS
    grad = _sigmoid(z) - y
    grad[clamped] = 0.0
    return float(np.minimum(terms, _LOG_EPS).sum()), grad


def _labels_of(membership) -> np.ndarray:
    return np.asarray(getattr(membership, "labels", membership))


def scl_loss_and_grad(
    V: np.ndarray, membership, tau: float, item_subset: Sequence[int] | None = None
) -> tuple[float, np.ndarray, int]:
    """Supervised contrastive loss over item clusters, its gradient and skip count.

    For each anchor item ``i`` with same-cluster peers ``Z(i)``::

        -log( mean_{z in Z(i)} exp(V_i.V_z / tau) / sum_{a != i} exp(V_i.V_a / tau) )

    summed over anchors. Dot products are unnormalised. With ``item_subset``
    both anchors and contrasted items are restricted to that subset. Anchors
    without peers contribute nothing and are counted in the third return
    value. The gradient has the shape of ``V`` and is zero outside the subset.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = _labels_of(membership)
    if labels.shape[0] != V.shape[0]:
        raise ValueError("membership length must equal the number of items")
    idx = np.arange(V.shape[0]) if item_subset is None else np.asarray(item_subset)
    X = V[idx]
    lab = labels[idx]
    n = len(idx)
    grad = np.zeros_like(V)
    if n < 2:
        return 0.0, grad, n

    S = (X @ X.T) / tau
    np.fill_diagonal(S, -np.inf)
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    npos = same.sum(axis=1)
    valid = npos > 0
    skipped = int(n - valid.sum())
    if not valid.any():
        return 0.0, grad, skipped

    v = valid
    m = S.max(axis=1, keepdims=True)
    E = np.exp(S - m)
    denom = E.sum(axis=1)
    # the positive sum gets its own max so it cannot underflow against the row max
    Sp = np.where(same, S, -np.inf)
    mp = np.where(v, Sp.max(axis=1), 0.0)[:, None]
    Ez = np.exp(np.where(same, S - mp, -np.inf))
    num = Ez.sum(axis=1)
    log_denom = np.log(denom[v]) + m[v, 0]
    log_num = np.log(num[v]) + mp[v, 0]
    loss = float(np.sum(log_denom - log_num + np.log(npos[v])))

    G = E / denom[:, None] - Ez / np.where(num > 0, num, 1.0)[:, None]
    G[~valid] = 0.0
    gX = ((G + G.T) @ X) / tau
    grad[idx] = gX
    return loss, grad, skipped


def scl_loss(V: np.ndarray, membership, tau: float, item_subset=None, return_skipped: bool = False):
    loss, _, skipped = scl_loss_and_grad(V, membership, tau, item_subset)
    return (loss, skipped) if return_skipped else loss


def item_similarity_loss_and_grad(
    V: np.ndarray, membership, train_items: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Negative mean cosine similarity of training items to their cluster peers.

    Each training item ``i`` contributes the mean cosine to its peers
    ``Z(i)`` (same cluster, any item but ``i``); these are averaged over the
    training items that have peers. Zero-norm rows give cosine 0.
    """
    labels = _labels_of(membership)
    items = np.asarray(train_items, dtype=np.int64)
    grad = np.zeros_like(V)
    if len(items) == 0:
        return 0.0, grad
    if items.min() < 0 or items.max() >= V.shape[0]:
        raise IndexError("train item out of range")

    norms = np.linalg.norm(V, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = V / safe[:, None]
    U[norms == 0] = 0.0

    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.unique(labels))
    members = {int(labels[order[s]]): order[s:e] for s, e in zip(bounds, list(bounds[1:]) + [len(order)])}

    total = 0.0
    counted = 0
    coef = np.zeros_like(V)  # d loss / d U, before dividing by the anchor count
    for i in items:
        peers = members[int(labels[i])]
        peers = peers[peers != i]
        if len(peers) == 0:
            continue
        counted += 1
        w = 1.0 / len(peers)
        total += w * float(np.sum(U[peers] @ U[i]))
        coef[i] -= w * U[peers].sum(axis=0)
        coef[peers] -= w * U[i]
    if counted == 0:
        return 0.0, grad
    loss = -total / counted
    coef /= counted
    # d u / d v = (I - u u^T) / |v|
    radial = np.sum(coef * U, axis=1, keepdims=True)
    grad = (coef - radial * U) / safe[:, None]
    grad[norms == 0] = 0.0
    return loss, grad


def item_similarity_loss(V: np.ndarray, membership, train_items: Sequence[int]) -> float:
    return item_similarity_loss_and_grad(V, membership, train_items)[0]


class Batch(NamedTuple):
    items: np.ndarray
    labels: np.ndarray


def make_batches(
    items: np.ndarray, labels: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[Batch]:
    """Shuffle (item, label) tuples and cut them into batches of at most ``batch_size``."""
    if len(items) != len(labels):
        raise ValueError("items and labels differ in length")
    perm = rng.permutation(len(items))
    items = np.asarray(items)[perm]
    labels = np.asarray(labels, dtype=np.float64)[perm]
    return [
        Batch(items[s : s + batch_size], labels[s : s + batch_size])
        for s in range(0, len(items), batch_size)
    ]


def structure_term(
    V: np.ndarray,
    membership,
    cfg: LossConfig,
    rng: np.random.Generator | None = None,
    train_items: Sequence[int] | None = None,
) -> tuple[float, np.ndarray]:
    """Unweighted item-structure loss and gradient for ``cfg.scl_variant``.

    Catalogues larger than ``cfg.scl_max_items`` use a uniform item subsample
    for the contrastive loss, rescaled by ``|I| / m`` to the full-sum scale.
    """
    if cfg.scl_variant == "none" or membership is None:
        return 0.0, np.zeros_like(V)
    if cfg.scl_variant == "item_s":
        if train_items is None:
            raise ValueError("item_s needs the client's training items")
        return item_similarity_loss_and_grad(V, membership, train_items)
    n = V.shape[0]
    if n <= cfg.scl_max_items:
        loss, grad, _ = scl_loss_and_grad(V, membership, cfg.tau)
        return loss, grad
    if rng is None:
        raise ValueError("subsampled contrastive loss needs an rng")
    subset = np.sort(rng.choice(n, size=cfg.scl_max_items, replace=False))
    loss, grad, _ = scl_loss_and_grad(V, membership, cfg.tau, subset)
    scale = n / cfg.scl_max_items
    return loss * scale, grad * scale


def batch_objective(
    V: np.ndarray,
    score_fn: ScoreFunction,
    batch: Batch,
    membership,
    cfg: LossConfig,
    train_items: Sequence[int] | None = None,
) -> float:
    """Full-catalogue value of one batch's objective (BCE + lam * structure term)."""
    z = score_fn.logits(V[batch.items])
    loss, _ = _bce_from_logits(z, batch.labels)
    if cfg.lam > 0:
        extra, _ = structure_term(V, membership, cfg.with_(scl_max_items=max(V.shape[0], 2)), None, train_items)
        loss += cfg.lam * extra
    return loss


def batch_gradients(
    V: np.ndarray,
    score_fn: ScoreFunction,
    batch: Batch,
    membership,
    cfg: LossConfig,
    train_items: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray, float, np.ndarray]:
    """Objective of one batch and its gradients ``(loss, dw, db, dV)``."""
    rows = V[batch.items]
    z = score_fn.logits(rows)
    loss, g = _bce_from_logits(z, batch.labels)
    dw = g @ rows
    db = float(g.sum())
    dV = np.zeros_like(V)
    np.add.at(dV, batch.items, np.outer(g, score_fn.weights))
    if cfg.lam > 0 and membership is not None and cfg.scl_variant != "none":
        extra, gextra = structure_term(V, membership, cfg, rng, train_items)
        loss += cfg.lam * extra
        dV += cfg.lam * gextra
    return loss, dw, db, dV


class LocalResult(NamedTuple):
    embeddings: np.ndarray
    score_fn: ScoreFunction
    loss: float


def local_train(
    V_init: np.ndarray,
    score_fn: ScoreFunction,
    batches: Sequence[Batch],
    membership,
    cfg: LossConfig,
    rng: np.random.Generator | None = None,
    train_items: Sequence[int] | None = None,
) -> LocalResult:
    """SGD over the client's batches, score function first, then embeddings.

    Each batch takes one step on ``(w, b)`` with ``V`` fixed, then one step on
    ``V`` using the updated score function. The inputs are not modified.
    ``membership=None`` (no item clusters yet) drops the structure term.
    Raises :class:`DivergenceError` if any parameter becomes non-finite.
    """
    V = np.array(V_init, dtype=np.float64, copy=True)
    theta = score_fn.copy()
    lr = cfg.learning_rate
    lr_v = lr * cfg.embedding_lr_scale
    total = 0.0
    structured = cfg.lam > 0 and membership is not None and cfg.scl_variant != "none"
    for _ in range(cfg.local_epochs):
        for batch in batches:
            rows = V[batch.items]
            _, g = _bce_from_logits(theta.logits(rows), batch.labels)
            theta.weights = theta.weights - lr * (g @ rows)
            theta.bias = theta.bias - lr * float(g.sum())

            loss, g = _bce_from_logits(theta.logits(rows), batch.labels)
            dV = np.zeros_like(V) if structured else None
            if structured:
                extra, gextra = structure_term(V, membership, cfg, rng, train_items)
                loss += cfg.lam * extra
                dV += cfg.lam * gextra
                np.add.at(dV, batch.items, np.outer(g, theta.weights))
                V -= lr_v * dV
            else:
                np.add.at(V, batch.items, -lr_v * np.outer(g, theta.weights))
            total += loss
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(theta.weights)) and np.isfinite(theta.bias)):
        raise DivergenceError("non-finite parameters after local training")
    return LocalResult(V, theta, total)


_MAGIC = b"CFRE"
_HEADER = struct.Struct("<4sQQ")


def save_matrix(path, matrix: np.ndarray) -> None:
    """Write a 2-D float64 matrix as header (magic, rows, cols) + row-major data."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, rows, cols = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(np.float64)
