"""Interaction-log ingestion, filtering, splitting, and BPR batch sampling.

Raw logs are UTF-8 TSV: user_key \t item_key [\t rating [\t timestamp]].
The pipeline is ingest -> kcore_filter -> split; the split owns the dense
index maps and materializes the train graph on demand.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import InteractionGraph, build_graph
from .rng import named_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    rating: float | None = None
    timestamp: int | None = None


def _parse_line(line: str) -> RawInteraction | None:
    fields = line.rstrip("\n").split("\t")
    if not 2 <= len(fields) <= 4:
        return None
    user_key, item_key = fields[0], fields[1]
    if not user_key or not item_key:
        return None
    rating = None
    timestamp = None
    try:
        if len(fields) >= 3 and fields[2] != "":
            rating = float(fields[2])
        if len(fields) == 4 and fields[3] != "":
            timestamp = int(fields[3])
    except ValueError:
        return None
    return RawInteraction(user_key, item_key, rating, timestamp)


def ingest(path: str | Path, strict: bool = False) -> tuple[list[RawInteraction], int]:
    """Read one interaction per line; returns (records, malformed_count).

    Malformed lines are skipped and counted, or fatal under strict=True.
    Blank lines are ignored without counting.
    """
    records: list[RawInteraction] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line)
            if rec is None:
                if strict:
                    raise ValueError(f"{path}:{lineno}: malformed interaction line")
                skipped += 1
                continue
            records.append(rec)
    if skipped:
        log.warning("ingest %s: skipped %d malformed lines", path, skipped)
    return records, skipped


def kcore_filter(interactions: list[RawInteraction], min_interactions: int,
                 rating_threshold: float | None = None) -> list[RawInteraction]:
    """Rating filter, then iterative removal of sparse users/items.

    Removal cascades until every remaining user and item has at least
    `min_interactions` interactions (a fixpoint, so re-applying the filter
    is the identity). Duplicate (user, item) pairs are collapsed to their
    first occurrence before counting.
    """
    kept = interactions
    if rating_threshold is not None:
        kept = [r for r in kept if r.rating is None or r.rating >= rating_threshold]
    seen: set[tuple[str, str]] = set()
    deduped = []
    for r in kept:
        pair = (r.user_key, r.item_key)
        if pair not in seen:
            seen.add(pair)
            deduped.append(r)
    kept = deduped
    while True:
        user_counts = Counter(r.user_key for r in kept)
        item_counts = Counter(r.item_key for r in kept)
        remaining = [r for r in kept
                     if user_counts[r.user_key] >= min_interactions
                     and item_counts[r.item_key] >= min_interactions]
        if len(remaining) == len(kept):
            return kept
        kept = remaining


@dataclass
class DatasetSplit:
    """Disjoint train/val/test edge lists over dense indices."""

    train: np.ndarray  # (n, 2) int64
    val: np.ndarray
    test: np.ndarray
    user_map: dict[str, int]
    item_map: dict[str, int]
    split_seed: int
    _train_graph: InteractionGraph | None = field(default=None, repr=False)

    @property
    def num_users(self) -> int:
        return len(self.user_map)

    @property
    def num_items(self) -> int:
        return len(self.item_map)

    def train_graph(self) -> InteractionGraph:
        if self._train_graph is None:
            self._train_graph = build_graph(self.train, self.num_users, self.num_items)
        return self._train_graph

    def stats(self) -> dict:
        total = len(self.train) + len(self.val) + len(self.test)
        cells = self.num_users * self.num_items
        sparsity = 1.0 - total / cells if cells else 0.0
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "num_interactions": total,
            "num_train": len(self.train),
            "num_val": len(self.val),
            "num_test": len(self.test),
            "sparsity": sparsity,
            "split_seed": self.split_seed,
        }


def split(interactions: list[RawInteraction], ratios: tuple[float, float, float],
          seed: int) -> DatasetSplit:
    """Assign each interaction independently to train/val/test.

    Index maps use lexicographic key order, so the same filtered data and
    seed always produce byte-identical manifests.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"ratios must be three non-negative values, got {ratios}")
    user_map = {k: idx for idx, k in enumerate(sorted({r.user_key for r in interactions}))}
    item_map = {k: idx for idx, k in enumerate(sorted({r.item_key for r in interactions}))}
    pairs = np.array([[user_map[r.user_key], item_map[r.item_key]] for r in interactions],
                     dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(ratios, dtype=np.float64)
    cut = np.cumsum(weights / weights.sum())[:2]
    rng = named_stream(seed, "split")
    bucket = np.searchsorted(cut, rng.random(pairs.shape[0]), side="right")
    return DatasetSplit(
        train=pairs[bucket == 0],
        val=pairs[bucket == 1],
        test=pairs[bucket == 2],
        user_map=user_map,
        item_map=item_map,
        split_seed=seed,
    )


@dataclass(frozen=True)
class BprBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    @property
    def size(self) -> int:
        return self.users.shape[0]


def sample_bpr_batch(train_graph: InteractionGraph, batch_size: int,
                     rng: np.random.Generator) -> BprBatch:
    """batch_size (u, i+, j-) triples: positives uniform over train edges,
    one uniform negative per positive resampled until it is a non-edge."""
    if train_graph.num_edges == 0:
        raise ValueError("cannot sample from an empty train graph")
    users_all, items_all = train_graph.edge_arrays()
    picked = rng.integers(0, train_graph.num_edges, size=batch_size)
    users = users_all[picked]
    pos = items_all[picked]
    neg = rng.integers(0, train_graph.num_items, size=batch_size)
    bad = train_graph.contains_pairs(users, neg)
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > train_graph.num_items:
            # Rejection sampling is hopeless for near-complete users; sample
            # the survivors exactly from each user's non-interacted items.
            neg = neg.copy()
            all_items = np.arange(train_graph.num_items)
            for k in np.flatnonzero(bad):
                pool = np.setdiff1d(all_items, train_graph.items_of(int(users[k])),
                                    assume_unique=True)
                if pool.size == 0:
                    raise RuntimeError(
                        "negative sampling failed: batch user interacts with every item")
                neg[k] = rng.choice(pool)
            break
        resample = rng.integers(0, train_graph.num_items, size=int(bad.sum()))
        neg = neg.copy()
        neg[bad] = resample
        bad = train_graph.contains_pairs(users, neg)
    return BprBatch(users=users, pos_items=pos, neg_items=neg)


# --- manifest persistence ---------------------------------------------------

_SPLIT_FILES = ("train.tsv", "val.tsv", "test.tsv")


def _write_edges(path: Path, edges: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in edges:
            fh.write(f"{u}\t{i}\n")


def _write_map(path: Path, mapping: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
            fh.write(f"{key}\t{idx}\n")


def write_split(ds: DatasetSplit, outdir: str | Path) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, edges in zip(_SPLIT_FILES, (ds.train, ds.val, ds.test)):
        _write_edges(out / name, edges)
    _write_map(out / "user_map.tsv", ds.user_map)
    _write_map(out / "item_map.tsv", ds.item_map)
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(ds.stats(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_edges(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, i = line.split("\t")
                rows.append((int(u), int(i)))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def _read_map(path: Path) -> dict[str, int]:
    mapping: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                key, idx = line.rstrip("\n").split("\t")
                mapping[key] = int(idx)
    return mapping


def load_split(indir: str | Path) -> DatasetSplit:
    src = Path(indir)
    with open(src / "stats.json", encoding="utf-8") as fh:
        stats = json.load(fh)
    train, val, test = (_read_edges(src / name) for name in _SPLIT_FILES)
    return DatasetSplit(
        train=train, val=val, test=test,
        user_map=_read_map(src / "user_map.tsv"),
        item_map=_read_map(src / "item_map.tsv"),
        split_seed=int(stats["split_seed"]),
    )
