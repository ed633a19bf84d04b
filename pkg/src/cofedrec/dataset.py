"""Rating-log ingestion, leave-latest-out splits and negative sampling.

Raw logs are MovieLens ``.dat``/``u.data`` files or a generic CSV with a
``user,item,rating,timestamp`` header. Everything downstream works on dense
0-based user and item indices.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

_logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for unreadable or malformed rating files."""


class RawRating(NamedTuple):
    user_id: int
    item_id: int
    rating: float
    timestamp: int | None = None


def _split_line(line: str, fmt: str) -> list[str]:
    if fmt == "dat" and "::" in line:
        return line.split("::")
    if "\t" in line:
        return line.split("\t")
    if fmt == "csv" or "," in line:
        return line.split(",")
    return line.split()


def load_movielens(
    path: str | os.PathLike, format: str = "dat", max_malformed: int = 0
) -> list[RawRating]:
    """Parse a rating log into :class:`RawRating` records.

    ``format="dat"`` accepts ``::``-separated MovieLens-1M style lines and the
    tab-separated ML-100K ``u.data`` layout. ``format="csv"`` accepts comma or
    tab separators and skips a header line whose first field is not numeric.
    Lines with three fields get ``timestamp=None``.

    More than ``max_malformed`` unparseable lines raise :class:`DataError`
    naming the first offending line; tolerated ones are logged.
    """
    if format not in ("dat", "csv"):
        raise DataError(f"unknown rating format {format!r}")
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    records: list[RawRating] = []
    bad: list[int] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in _split_line(line, format)]
        if lineno == 1 and format == "csv" and not parts[0].lstrip("-").isdigit():
            # header
            continue
        try:
            if len(parts) not in (3, 4):
                raise ValueError(f"expected 3 or 4 fields, got {len(parts)}")
            user, item = int(parts[0]), int(parts[1])
            if user < 0 or item < 0:
                raise ValueError("negative id")
            rating = float(parts[2])
            ts = int(float(parts[3])) if len(parts) == 4 and parts[3] != "" else None
        except ValueError as exc:
            bad.append(lineno)
            if len(bad) > max_malformed:
                raise DataError(f"{path}: line {lineno}: cannot parse {line!r} ({exc})") from None
            continue
        records.append(RawRating(user, item, rating, ts))

    if bad:
        _logger.warning("%s: skipped %d malformed line(s), first at line %d", path, len(bad), bad[0])
    if not records:
        raise DataError(f"{path}: no rating records")
    return records


@dataclass
class InteractionDataset:
    """Implicit-feedback interactions split per user.

    ``train[u]`` is the sorted array of training positives of user ``u``;
    ``validation[u]`` and ``test[u]`` are single held-out item indices.
    ``user_ids[u]`` / ``item_ids[i]`` give the raw ids of dense indices.
    """

    num_users: int
    num_items: int
    train: list[np.ndarray]
    validation: np.ndarray | None
    test: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    dropped_users: list[int] = field(default_factory=list)

    @property
    def user_id_map(self) -> dict[int, int]:
        return {int(raw): u for u, raw in enumerate(self.user_ids)}

    @property
    def item_id_map(self) -> dict[int, int]:
        return {int(raw): i for i, raw in enumerate(self.item_ids)}

    @property
    def num_interactions(self) -> int:
        held = 2 if self.validation is not None else 1
        return sum(len(t) for t in self.train) + held * self.num_users

    def heldout(self, user: int) -> np.ndarray:
        if self.validation is None:
            return np.array([self.test[user]])
        return np.array([self.validation[user], self.test[user]])

    def interacted(self, user: int) -> np.ndarray:
        """Sorted indices of every item the user touched (train, validation, test)."""
        return np.union1d(self.train[user], self.heldout(user))

    def export_id_maps(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        for name, ids in (("user_map.csv", self.user_ids), ("item_map.csv", self.item_ids)):
            with open(os.path.join(directory, name), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["raw_id", "index"])
                for idx, raw in enumerate(ids):
                    w.writerow([int(raw), idx])


def build_splits(
    ratings: Sequence[RawRating], min_interactions: int = 5, with_validation: bool = True
) -> InteractionDataset:
    """Deduplicate, filter and split ratings leave-latest-out.

    Every rating (including 0) becomes an implicit positive. Duplicate
    (user, item) pairs keep the latest timestamp. Missing timestamps fall
    back to input order. Per user, interactions are ordered by
    (timestamp, raw item id); the latest is the test item, the one before it
    the validation item, and the rest form the training set. Users with
    fewer than ``min_interactions`` distinct items, or with no training
    positive left after the split, are dropped.
    """
    if not ratings:
        raise DataError("no ratings to split")

    latest: dict[tuple[int, int], int] = {}
    for order, r in enumerate(ratings):
        ts = r.timestamp if r.timestamp is not None else order
        key = (r.user_id, r.item_id)
        if key not in latest or ts >= latest[key]:
            latest[key] = ts

    per_user: dict[int, list[tuple[int, int]]] = {}
    for (user, item), ts in latest.items():
        per_user.setdefault(user, []).append((ts, item))

    held = 2 if with_validation else 1
    kept: dict[int, list[int]] = {}
    dropped: list[int] = []
    for user in sorted(per_user):
        events = per_user[user]
        if len(events) < min_interactions:
            continue
        if len(events) <= held:
            _logger.warning("user %d has no training positive after splitting; dropped", user)
            dropped.append(user)
            continue
        events.sort()
        kept[user] = [item for _, item in events]

    if not kept:
        raise DataError("no users left after filtering")

    item_ids = np.array(sorted({i for items in kept.values() for i in items}), dtype=np.int64)
    item_index = {int(raw): idx for idx, raw in enumerate(item_ids)}
    user_ids = np.array(sorted(kept), dtype=np.int64)

    train, val, test = [], [], []
    for user in user_ids:
        seq = [item_index[i] for i in kept[int(user)]]
        test.append(seq[-1])
        if with_validation:
            val.append(seq[-2])
        train.append(np.array(sorted(seq[:-held]), dtype=np.int64))

    return InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        train=train,
        validation=np.array(val, dtype=np.int64) if with_validation else None,
        test=np.array(test, dtype=np.int64),
        user_ids=user_ids,
        item_ids=item_ids,
        dropped_users=dropped,
    )


class NegativeSample(NamedTuple):
    items: np.ndarray
    with_replacement: bool


def sample_train_negatives(
    dataset: InteractionDataset,
    user: int,
    num_per_positive: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None = None,
    num_positives: int | None = None,
    include_heldout: bool = False,
) -> NegativeSample:
    """Draw ``num_per_positive * |train_u|`` negatives the user never interacted with.

    The pool excludes the user's train items and, unless ``include_heldout``,
    the held-out validation/test items too (they are interactions of the user,
    just not training ones). Sampling is without replacement unless the pool is
    too small, in which case it switches to with-replacement and sets the flag.
    ``exclude`` removes further items from the pool (virtual ratings);
    ``num_positives`` overrides the positive count used for the sample size.
    """
    if not 0 <= user < dataset.num_users:
        raise IndexError(f"user {user} out of range")
    blocked = dataset.train[user] if include_heldout else dataset.interacted(user)
    if exclude is not None and len(exclude):
        blocked = np.union1d(blocked, exclude)
    pool = np.setdiff1d(np.arange(dataset.num_items), blocked, assume_unique=True)
    n_pos = len(dataset.train[user]) if num_positives is None else num_positives
    count = num_per_positive * n_pos
    if count == 0:
        return NegativeSample(np.empty(0, dtype=np.int64), False)
    if len(pool) == 0:
        raise ValueError(f"user {user} has no non-interacted items to sample")
    if count > len(pool):
        return NegativeSample(rng.choice(pool, size=count, replace=True), True)
    return NegativeSample(rng.choice(pool, size=count, replace=False), False)


@dataclass
class EvalCandidates:
    """Fixed per-user negatives for sampled evaluation.

    In ``sampled`` mode ``negatives[u]`` holds (up to) ``num_negatives`` items
    outside the user's train/validation/test items; the held-out item is
    prepended by :meth:`for_user`. In ``full_rank`` mode the lists are empty
    and ranking runs over the whole catalogue.
    """

    mode: str
    negatives: list[np.ndarray]
    shortfall: dict[int, int] = field(default_factory=dict)

    def for_user(self, user: int, heldout_item: int) -> np.ndarray:
        if self.mode != "sampled":
            raise ValueError("full-rank candidates are not materialised")
        return np.concatenate(([heldout_item], self.negatives[user]))


def build_eval_candidates(
    dataset: InteractionDataset,
    mode: str = "sampled",
    rng: np.random.Generator | None = None,
    num_negatives: int = 99,
) -> EvalCandidates:
    if mode not in ("sampled", "full_rank"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "full_rank":
        return EvalCandidates(mode, [np.empty(0, dtype=np.int64) for _ in range(dataset.num_users)])
    if rng is None:
        raise ValueError("sampled candidates need an rng")
    all_items = np.arange(dataset.num_items)
    negatives, shortfall = [], {}
    for u in range(dataset.num_users):
        pool = np.setdiff1d(all_items, dataset.interacted(u), assume_unique=True)
        if len(pool) < num_negatives:
            shortfall[u] = num_negatives - len(pool)
            negatives.append(rng.permutation(pool))
        else:
            negatives.append(rng.choice(pool, size=num_negatives, replace=False))
    if shortfall:
        _logger.warning("%d user(s) have fewer than %d eligible eval negatives", len(shortfall), num_negatives)
    return EvalCandidates(mode, negatives, shortfall)


class VirtualRatings(NamedTuple):
    items: np.ndarray
    labels: np.ndarray


def inject_virtual_ratings(
    dataset: InteractionDataset, ratio: float, rng: np.random.Generator
) -> list[VirtualRatings]:
    """Per-user randomly labelled pseudo-interactions.

    For each user, ``ceil(ratio * |train_u|)`` items are drawn from the items
    the user never touched and labelled 0 or 1 with equal probability. The
    dataset itself is not modified.
    """
    if not 0.0 <= ratio <= 0.5:
        raise ValueError("virtual rating ratio must lie in [0, 0.5]")
    all_items = np.arange(dataset.num_items)
    out = []
    for u in range(dataset.num_users):
        count = math.ceil(ratio * len(dataset.train[u]) - 1e-9) if ratio > 0 else 0
        if count == 0:
            out.append(VirtualRatings(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)))
            continue
        pool = np.setdiff1d(all_items, dataset.interacted(u), assume_unique=True)
        items = np.sort(rng.choice(pool, size=min(count, len(pool)), replace=False))
        labels = rng.integers(0, 2, size=len(items))
        out.append(VirtualRatings(items, labels))
    return out
