"""Seeded synthetic implicit-feedback data with power-law popularity.

Produces interaction logs shaped like public recommendation benchmarks:
heavy-tailed user activity and item popularity, and latent interest
clusters that give the embeddings real structure to recover. Users follow
a small random SET of clusters rather than exactly one, so the resulting
preference matrix is high-rank and long-tailed — the regime contrastive
regularization is supposed to help with — instead of a toy block model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RawInteraction
from .rng import named_stream


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 2000
    num_items: int = 4000
    target_interactions: int = 100_000
    num_clusters: int = 48
    interests_low: int = 1
    interests_high: int = 3
    in_cluster_prob: float = 0.8
    user_exponent: float = 1.1
    item_exponent: float = 1.3


def _power_weights(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    weights = ranks ** (-exponent)
    rng.shuffle(weights)
    return weights / weights.sum()


def generate_interactions(config: SyntheticConfig, seed: int) -> list[RawInteraction]:
    """Sample pairs until `target_interactions` distinct ones exist."""
    rng = named_stream(seed, "synthetic")
    cfg = config
    item_cluster = rng.integers(0, cfg.num_clusters, size=cfg.num_items)
    user_w = _power_weights(cfg.num_users, cfg.user_exponent, rng)
    item_w = _power_weights(cfg.num_items, cfg.item_exponent, rng)

    # each user follows between interests_low and interests_high clusters
    k = rng.integers(cfg.interests_low, cfg.interests_high + 1, size=cfg.num_users)
    interests = np.zeros((cfg.num_users, cfg.interests_high), dtype=np.int64)
    for u in range(cfg.num_users):
        interests[u, : k[u]] = rng.choice(cfg.num_clusters, size=k[u], replace=False)

    # per-cluster item samplers: popularity renormalized within the cluster
    cluster_items = [np.flatnonzero(item_cluster == c) for c in range(cfg.num_clusters)]
    cluster_item_w = []
    for members in cluster_items:
        w = item_w[members]
        cluster_item_w.append(w / w.sum() if members.size else w)

    keys = np.empty(0, dtype=np.int64)
    while keys.size < cfg.target_interactions:
        want = cfg.target_interactions - keys.size
        draw = int(want * 1.5) + 64
        users = rng.choice(cfg.num_users, size=draw, p=user_w)
        stay = rng.random(draw) < cfg.in_cluster_prob
        pick = rng.integers(0, k[users])
        clusters = interests[users, pick]
        items = np.empty(draw, dtype=np.int64)
        # off-interest interactions drift with global popularity, not uniformly
        off = ~stay
        if off.any():
            items[off] = rng.choice(cfg.num_items, size=int(off.sum()), p=item_w)
        for c in range(cfg.num_clusters):
            mask = stay & (clusters == c)
            if not mask.any():
                continue
            members = cluster_items[c]
            if members.size == 0:
                items[mask] = rng.choice(cfg.num_items, size=int(mask.sum()), p=item_w)
                continue
            items[mask] = rng.choice(members, size=int(mask.sum()), p=cluster_item_w[c])
        batch = users * cfg.num_items + items
        keys = np.union1d(keys, batch)
    # union1d sorts, so trimming keeps a deterministic prefix
    keys = keys[: cfg.target_interactions]
    users = keys // cfg.num_items
    items = keys % cfg.num_items
    return [RawInteraction(f"u{u:05d}", f"i{i:05d}") for u, i in zip(users, items)]


def write_interactions(path, records: list[RawInteraction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fields = [r.user_key, r.item_key]
            if r.rating is not None:
                fields.append(repr(r.rating))
                if r.timestamp is not None:
                    fields.append(str(r.timestamp))
            fh.write("\t".join(fields) + "\n")
