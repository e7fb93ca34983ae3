"""Top-N evaluation over full rankings, plus robustness instrumentation.

Recall@N and NDCG@N are averaged over users with non-empty ground truth;
users or items absent from the train split are treated as cold and never
scored as relevant. Ranking candidates are every item the user has not
interacted with in train (test-phase evaluation additionally hides the
user's validation items). Per-user work parallelizes across a thread pool
capped by AVOGCL_THREADS; the reduction order is fixed, so thread count
never changes results.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSplit
from .encoder import ForwardTrace
from .graph import InteractionGraph, build_graph

log = logging.getLogger(__name__)

CSV_FIELDS = ("mode", "dataset", "seed", "N", "recall", "ndcg")


def _thread_cap() -> int:
    raw = os.environ.get("AVOGCL_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def recall_at(ranked, relevant, n: int) -> float:
    """|top-n hits| / |relevant|."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = sum(1 for item in list(ranked)[:n] if item in relevant)
    return hits / len(relevant)


def ndcg_at(ranked, relevant, n: int) -> float:
    """DCG over hit ranks normalized by the best achievable DCG.

    DCG = sum over hits at rank r <= n of 1/log2(r+1); the ideal places
    min(n, |relevant|) hits at the top ranks.
    """
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    dcg = sum(1.0 / np.log2(r + 1)
              for r, item in enumerate(list(ranked)[:n], start=1) if item in relevant)
    ideal = min(n, len(relevant))
    idcg = sum(1.0 / np.log2(r + 1) for r in range(1, ideal + 1))
    return float(dcg / idcg)


@dataclass
class EvalReport:
    phase: str
    topk: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    users_evaluated: int
    users_excluded: int
    buckets: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "phase": self.phase,
            "users_evaluated": self.users_evaluated,
            "users_excluded": self.users_excluded,
        }
        for n in self.topk:
            out[f"recall@{n}"] = self.recall[n]
            out[f"ndcg@{n}"] = self.ndcg[n]
        if self.buckets:
            out["buckets"] = {name: rep.to_dict() for name, rep in self.buckets.items()}
        return out


def _phase_edges(split: DatasetSplit, phase: str) -> np.ndarray:
    if phase == "val":
        return split.val
    if phase == "test":
        return split.test
    raise ValueError(f"phase must be val|test, got {phase}")


def _group_by_user(edges: np.ndarray, num_users: int) -> list[np.ndarray]:
    groups: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * num_users
    if edges.shape[0] == 0:
        return groups
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]
    users, starts = np.unique(edges[:, 0], return_index=True)
    bounds = np.append(starts, edges.shape[0])
    for k, u in enumerate(users):
        groups[u] = edges[bounds[k]:bounds[k + 1], 1]
    return groups


def evaluate_full_ranking(trace: ForwardTrace, split: DatasetSplit, phase: str,
                          topk_list: tuple[int, ...],
                          user_subset: np.ndarray | None = None,
                          item_subset: np.ndarray | None = None) -> EvalReport:
    """Average Recall@N / NDCG@N over all evaluable users.

    A user is skipped (counted excluded) when cold in train or when their
    ground truth is empty after dropping cold items; `user_subset` /
    `item_subset` restrict who is evaluated and which items may count as
    relevant (used by the sparsity-bucket breakdowns).
    """
    topk = tuple(int(n) for n in topk_list)
    if not topk or any(n < 1 for n in topk):
        raise ValueError(f"topk_list must be positive cutoffs, got {topk_list}")
    num_users = split.num_users
    num_items = split.num_items
    graph = split.train_graph()
    warm_user = graph.user_degrees > 0
    warm_item = graph.item_degrees > 0
    item_allowed = warm_item.copy()
    if item_subset is not None:
        mask = np.zeros(num_items, dtype=bool)
        mask[item_subset] = True
        item_allowed &= mask

    truth = _group_by_user(_phase_edges(split, phase), num_users)
    val_truth = _group_by_user(split.val, num_users) if phase == "test" else None
    candidates = np.arange(num_users) if user_subset is None else np.asarray(user_subset)

    max_n = max(topk)
    ideal_gain = np.concatenate([[0.0], 1.0 / np.log2(np.arange(1, max_n + 1) + 1.0)])
    ideal_cum = np.cumsum(ideal_gain)

    recall_sums = {n: 0.0 for n in topk}
    ndcg_sums = {n: 0.0 for n in topk}
    per_user: dict[int, dict[int, tuple[float, float]]] = {}
    excluded = 0
    eligible: list[int] = []
    relevant_by_user: dict[int, np.ndarray] = {}
    for u in candidates:
        u = int(u)
        relevant = truth[u]
        relevant = relevant[item_allowed[relevant]]
        if not warm_user[u] or relevant.size == 0:
            excluded += 1
            continue
        eligible.append(u)
        relevant_by_user[u] = relevant

    final_user = trace.final_user
    final_item = trace.final_item

    def eval_user(u: int) -> dict[int, tuple[float, float]]:
        scores = final_item @ final_user[u]
        hide = graph.items_of(u)
        scores[hide] = -np.inf
        if val_truth is not None and val_truth[u].size:
            scores[val_truth[u]] = -np.inf
        order = np.argsort(-scores, kind="stable")[:max_n]
        rel_mask = np.zeros(num_items, dtype=bool)
        rel = relevant_by_user[u]
        rel_mask[rel] = True
        hit_pos = np.flatnonzero(rel_mask[order])  # 0-based ranks of hits
        out = {}
        for n in topk:
            hits = hit_pos[hit_pos < n]
            rec = hits.size / rel.size
            dcg = float((1.0 / np.log2(hits + 2.0)).sum())
            idcg = ideal_cum[min(n, rel.size)]
            out[n] = (rec, dcg / idcg)
        return out

    threads = _thread_cap()
    if threads > 1 and len(eligible) > 64:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(eval_user, eligible))
        for u, res in zip(eligible, results):
            per_user[u] = res
    else:
        for u in eligible:
            per_user[u] = eval_user(u)

    for u in eligible:  # fixed-order reduction
        for n in topk:
            rec, nd = per_user[u][n]
            recall_sums[n] += rec
            ndcg_sums[n] += nd
    count = len(eligible)
    denom = max(count, 1)
    return EvalReport(
        phase=phase,
        topk=topk,
        recall={n: recall_sums[n] / denom for n in topk},
        ndcg={n: ndcg_sums[n] / denom for n in topk},
        users_evaluated=count,
        users_excluded=excluded,
    )


def view_similarity(view_a: np.ndarray, view_b: np.ndarray) -> float:
    """Mean per-node cosine between two embedding views."""
    if view_a.shape != view_b.shape:
        raise ValueError(f"view shapes differ: {view_a.shape} vs {view_b.shape}")
    na = np.linalg.norm(view_a, axis=1)
    nb = np.linalg.norm(view_b, axis=1)
    zero = (na == 0.0) | (nb == 0.0)
    if zero.any():
        log.warning("view_similarity: %d zero-vector pairs contribute 0", int(zero.sum()))
    denom = np.where(zero, 1.0, na * nb)
    cos = np.einsum("nd,nd->n", view_a, view_b) / denom
    cos[zero] = 0.0
    return float(cos.mean())


def inject_noise(train_graph: InteractionGraph, ratio: float,
                 rng: np.random.Generator) -> InteractionGraph:
    """Add ceil(ratio * num_edges) uniformly sampled fake edges."""
    if ratio < 0:
        raise ValueError(f"noise ratio must be >= 0, got {ratio}")
    count = int(np.ceil(ratio * train_graph.num_edges))
    if count == 0:
        return train_graph
    from .structure import _sample_non_edges
    fake = _sample_non_edges(train_graph, count, rng)
    users, items = train_graph.edge_arrays()
    edges = np.concatenate([np.stack([users, items], axis=1), fake], axis=0)
    return build_graph(edges, train_graph.num_users, train_graph.num_items)


def sparsity_buckets(split: DatasetSplit, side: str, k: int = 5) -> list[np.ndarray]:
    """Indices grouped into k equal-population buckets by ascending train
    degree (ties by index); bucket 0 holds the sparsest nodes."""
    if k < 1:
        raise ValueError(f"bucket count must be >= 1, got {k}")
    graph = split.train_graph()
    if side == "user":
        counts = graph.user_degrees
    elif side == "item":
        counts = graph.item_degrees
    else:
        raise ValueError(f"side must be user|item, got {side}")
    order = np.lexsort((np.arange(counts.shape[0]), counts))
    return list(np.array_split(order, k))


def bucket_reports(trace: ForwardTrace, split: DatasetSplit, phase: str,
                   topk_list, side: str = "user", k: int = 5) -> dict[str, EvalReport]:
    """Per-bucket evaluation named test1 (sparsest) .. testk."""
    buckets = sparsity_buckets(split, side, k)
    out: dict[str, EvalReport] = {}
    for idx, nodes in enumerate(buckets, start=1):
        if side == "user":
            rep = evaluate_full_ranking(trace, split, phase, topk_list, user_subset=nodes)
        else:
            rep = evaluate_full_ranking(trace, split, phase, topk_list, item_subset=nodes)
        out[f"test{idx}"] = rep
    return out


def report_rows(report: EvalReport, mode: str, dataset: str, seed: int) -> list[dict]:
    return [
        {"mode": mode, "dataset": dataset, "seed": seed, "N": n,
         "recall": report.recall[n], "ndcg": report.ndcg[n]}
        for n in report.topk
    ]


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
