"""Synthetic interaction logs with planted user groups.

Users are split into groups, and each group prefers its own disjoint block of
items. Inside a block, item popularity follows a Zipf-like law. A fraction of
each user's interactions is noise drawn uniformly from the whole catalogue,
so the structure is strong but not perfectly separable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import RawRating


@dataclass
class PlantedData:
    ratings: list[RawRating]
    user_group: dict[int, int]  # raw user id -> planted group
    item_group: dict[int, int]  # raw item id -> block it belongs to


def planted_groups(
    num_users: int = 400,
    num_items: int = 200,
    num_groups: int = 2,
    interactions: tuple[int, int] = (15, 40),
    noise: float = 0.1,
    zipf_exponent: float = 0.8,
    seed: int = 0,
) -> PlantedData:
    """Draw a planted-group rating log.

    User ``u`` belongs to group ``u % num_groups`` and item ``i`` to block
    ``i * num_groups // num_items``. Each user draws a length uniformly from
    ``interactions`` and samples that many distinct items: with probability
    ``1 - noise`` from the own block by popularity, otherwise uniformly.
    Timestamps are a random permutation so the held-out items follow the same
    mixture as the training ones.
    """
    if num_groups < 1 or num_items < num_groups:
        raise ValueError("need at least one item per group")
    rng = np.random.default_rng(seed)
    blocks = [np.arange(num_items)[np.arange(num_items) * num_groups // num_items == g] for g in range(num_groups)]
    block_probs = []
    for b in blocks:
        w = 1.0 / np.arange(1, len(b) + 1) ** zipf_exponent
        block_probs.append(w / w.sum())

    ratings: list[RawRating] = []
    user_group = {}
    lo, hi = interactions
    for u in range(num_users):
        g = u % num_groups
        user_group[u] = g
        target = min(int(rng.integers(lo, hi + 1)), num_items)
        chosen: list[int] = []
        seen = set()
        while len(chosen) < target:
            if rng.random() < noise:
                item = int(rng.integers(num_items))
            else:
                item = int(rng.choice(blocks[g], p=block_probs[g]))
            if item not in seen:
                seen.add(item)
                chosen.append(item)
        stamps = rng.permutation(len(chosen))
        ratings.extend(RawRating(u, item, 1.0, int(t)) for item, t in zip(chosen, stamps))
    item_group = {int(i): g for g, b in enumerate(blocks) for i in b}
    return PlantedData(ratings, user_group, item_group)


def write_csv(ratings, path) -> None:
    """Write ratings in the ``user,item,rating,timestamp`` CSV layout the loader reads."""
    with open(path, "w") as fh:
        fh.write("user,item,rating,timestamp\n")
        for r in ratings:
            ts = "" if r.timestamp is None else r.timestamp
            fh.write(f"{r.user_id},{r.item_id},{r.rating:g},{ts}\n")
