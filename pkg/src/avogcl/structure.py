"""Learned graph editing: candidate sampling, edge discriminator, edit selection.

The adversary that rewires the interaction graph. Each epoch it samples a
pool of existing edges and an equally sized pool of non-edges, refreshes a
small MLP that scores pair plausibility, then deletes the most confidently
real edges and inserts the most confidently fake ones — removing exactly the
structure the encoder leans on hardest. Edits always apply to the original
graph, never to last epoch's perturbed one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .graph import EditPlan, InteractionGraph, PerturbedGraph, apply_edits
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class Discriminator:
    """Two-layer pair scorer: concat(e_u, e_i) -> ReLU(d) -> sigmoid scalar."""

    w1: np.ndarray  # (2d, d) float32
    b1: np.ndarray  # (d,)   float32
    w2: np.ndarray  # (d,)   float32
    b2: np.ndarray  # (1,)   float32

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass
class DiscriminatorAdam:
    states: tuple[AdamState, ...]

    @classmethod
    def for_discriminator(cls, disc: Discriminator) -> "DiscriminatorAdam":
        return cls(tuple(AdamState.for_param(p) for p in disc.params()))


def init_discriminator(d: int, rng: np.random.Generator) -> Discriminator:
    """Glorot-uniform weights, zero biases."""
    bound1 = np.sqrt(6.0 / (2 * d + d))
    bound2 = np.sqrt(6.0 / (d + 1))
    return Discriminator(
        w1=rng.uniform(-bound1, bound1, size=(2 * d, d)).astype(np.float32),
        b1=np.zeros(d, dtype=np.float32),
        w2=rng.uniform(-bound2, bound2, size=d).astype(np.float32),
        b2=np.zeros(1, dtype=np.float32),
    )


@dataclass(frozen=True)
class CandidateSets:
    """m sampled existing edges and m sampled non-edges, as (u, i) rows."""

    s_pos: np.ndarray  # (m, 2) int64
    s_neg: np.ndarray  # (m, 2) int64
    alpha: float

    @property
    def size(self) -> int:
        return self.s_pos.shape[0]


def _sample_non_edges(graph: InteractionGraph, m: int,
                      rng: np.random.Generator) -> np.ndarray:
    """m distinct (u, i) pairs absent from the graph, by rejection sampling.

    Gives up after m * num_items uniform draws; only near-complete bipartite
    graphs can exhaust that budget.
    """
    neg_keys: list[np.ndarray] = []
    have = 0
    attempts = 0
    cap = m * graph.num_items
    seen = np.empty(0, dtype=np.int64)
    while have < m:
        want = m - have
        if attempts >= cap:
            raise RuntimeError(
                f"could not sample {m} non-edges within {cap} attempts; graph too dense")
        draw = max(min(want * 2, cap - attempts), 1)
        cu = rng.integers(0, graph.num_users, size=draw)
        ci = rng.integers(0, graph.num_items, size=draw)
        attempts += draw
        keys = cu * graph.num_items + ci
        fresh_mask = ~graph.contains_pairs(cu, ci)
        if seen.size:
            fresh_mask &= ~np.isin(keys, seen)
        # dedupe within the draw, keeping first occurrences in draw order
        keys = keys[fresh_mask]
        _, first = np.unique(keys, return_index=True)
        keys = keys[np.sort(first)][:want]
        if keys.size:
            neg_keys.append(keys)
            seen = np.concatenate([seen, keys])
            have += keys.size
    all_neg = np.concatenate(neg_keys)
    return np.stack([all_neg // graph.num_items, all_neg % graph.num_items], axis=1)


def sample_candidates(graph: InteractionGraph, alpha: float,
                      rng: np.random.Generator) -> CandidateSets:
    """Draw round(alpha * num_edges) positives (without replacement) and as
    many distinct negatives by rejection; alpha=0 consumes no randomness."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    m = int(round(alpha * graph.num_edges))
    empty = np.empty((0, 2), dtype=np.int64)
    if m == 0:
        return CandidateSets(s_pos=empty, s_neg=empty, alpha=alpha)
    users, items = graph.edge_arrays()
    picked = rng.choice(graph.num_edges, size=m, replace=False)
    s_pos = np.stack([users[picked], items[picked]], axis=1)
    s_neg = _sample_non_edges(graph, m, rng)
    return CandidateSets(s_pos=s_pos, s_neg=s_neg, alpha=alpha)


def _pair_features(user_emb: np.ndarray, item_emb: np.ndarray,
                   pairs: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [user_emb[pairs[:, 0]], item_emb[pairs[:, 1]]], axis=1).astype(np.float64)


def _mlp_forward(disc: Discriminator, x: np.ndarray):
    pre = x @ disc.w1.astype(np.float64) + disc.b1.astype(np.float64)
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ disc.w2.astype(np.float64) + float(disc.b2[0])
    return logits, pre, hidden


def discriminator_score(disc: Discriminator, user_vec: np.ndarray,
                        item_vec: np.ndarray) -> float:
    """Probability that (u, i) is a real edge, strictly inside (0, 1)."""
    x = np.concatenate([user_vec, item_vec]).astype(np.float64)[None, :]
    logits, _, _ = _mlp_forward(disc, x)
    return float(expit(logits[0]))


def score_pairs(disc: Discriminator, user_emb: np.ndarray, item_emb: np.ndarray,
                pairs: np.ndarray) -> np.ndarray:
    logits, _, _ = _mlp_forward(disc, _pair_features(user_emb, item_emb, pairs))
    return expit(logits)


def bce_loss_and_grads(disc: Discriminator, x: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy over rows of x, plus parameter gradients.

    Computed from logits: BCE(z, y) = y*log(1+e^-z) + (1-y)*log(1+e^z),
    so nothing saturates for extreme z.
    """
    n = x.shape[0]
    logits, pre, hidden = _mlp_forward(disc, x)
    loss = float(np.mean(labels * np.logaddexp(0.0, -logits)
                         + (1.0 - labels) * np.logaddexp(0.0, logits)))
    dz = (expit(logits) - labels) / n
    d_w2 = hidden.T @ dz
    d_b2 = np.array([dz.sum()])
    d_hidden = np.outer(dz, disc.w2.astype(np.float64))
    d_hidden[pre <= 0.0] = 0.0
    d_w1 = x.T @ d_hidden
    d_b1 = d_hidden.sum(axis=0)
    return loss, (d_w1, d_b1, d_w2, d_b2)


def candidate_bce(disc: Discriminator, candidates: CandidateSets,
                  user_emb: np.ndarray, item_emb: np.ndarray):
    pairs = np.concatenate([candidates.s_pos, candidates.s_neg], axis=0)
    labels = np.concatenate([np.ones(candidates.size), np.zeros(candidates.size)])
    x = _pair_features(user_emb, item_emb, pairs)
    return bce_loss_and_grads(disc, x, labels)


def train_discriminator(disc: Discriminator, candidates: CandidateSets,
                        user_emb: np.ndarray, item_emb: np.ndarray,
                        steps: int, lr: float,
                        adam: DiscriminatorAdam | None = None) -> float:
    """Run `steps` Adam updates of the pair scorer on the candidate pools.

    Embeddings are read-only snapshots here; no gradient reaches them.
    Returns the mean BCE measured before the first update (the warm-start
    quality the subsequent selection actually improves on).
    """
    if candidates.size == 0:
        raise ValueError("cannot train discriminator on empty candidate sets")
    if adam is None:
        adam = DiscriminatorAdam.for_discriminator(disc)
    first_loss = None
    for _ in range(steps):
        loss, grads = candidate_bce(disc, candidates, user_emb, item_emb)
        if first_loss is None:
            first_loss = loss
        for param, grad, state in zip(disc.params(), grads, adam.states):
            adam_step(param, grad, state, lr)
    if first_loss is None:
        first_loss, _ = candidate_bce(disc, candidates, user_emb, item_emb)
    return first_loss


def _ranked(pairs: np.ndarray, scores: np.ndarray, count: int,
            descending: bool) -> np.ndarray:
    keys = -scores if descending else scores
    order = np.lexsort((pairs[:, 1], pairs[:, 0], keys))
    return pairs[order[:count]]


def select_edits(disc: Discriminator, candidates: CandidateSets,
                 user_emb: np.ndarray, item_emb: np.ndarray,
                 select_fraction: float) -> EditPlan:
    """Turn the most confident candidates into an EditPlan.

    Deletions: ceil(fraction * m) positives with the HIGHEST scores (the
    edges the model is most sure about). Insertions: as many negatives with
    the LOWEST scores. Score ties fall back to (u, i) order so the plan is a
    pure function of the scores.
    """
    if not 0.0 < select_fraction <= 1.0:
        raise ValueError(f"select_fraction must lie in (0, 1], got {select_fraction}")
    if candidates.size == 0:
        return EditPlan.from_lists([], [])
    count = int(np.ceil(select_fraction * candidates.size))
    pos_scores = score_pairs(disc, user_emb, item_emb, candidates.s_pos)
    neg_scores = score_pairs(disc, user_emb, item_emb, candidates.s_neg)
    deletions = _ranked(candidates.s_pos, pos_scores, count, descending=True)
    insertions = _ranked(candidates.s_neg, neg_scores, count, descending=False)
    return EditPlan(deletions=deletions, insertions=insertions)


def random_edits(graph: InteractionGraph, num_delete: int, num_insert: int,
                 rng: np.random.Generator) -> EditPlan:
    """Uniform-random plan of the given budget (the unguided control)."""
    empty = np.empty((0, 2), dtype=np.int64)
    deletions = empty
    if num_delete > 0:
        users, items = graph.edge_arrays()
        picked = rng.choice(graph.num_edges, size=num_delete, replace=False)
        deletions = np.stack([users[picked], items[picked]], axis=1)
    insertions = empty
    if num_insert > 0:
        insertions = _sample_non_edges(graph, num_insert, rng)
    return EditPlan(deletions=deletions, insertions=insertions)


def random_deletion_plan(graph: InteractionGraph, ratio: float,
                         rng: np.random.Generator) -> EditPlan:
    """Delete a uniform ratio of edges; the edge-drop view used by the
    non-adversarial contrastive baselines."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"drop ratio must lie in [0, 1], got {ratio}")
    count = int(round(ratio * graph.num_edges))
    if count == 0:
        return EditPlan.from_lists([], [])
    users, items = graph.edge_arrays()
    picked = rng.choice(graph.num_edges, size=count, replace=False)
    deletions = np.stack([users[picked], items[picked]], axis=1)
    return EditPlan(deletions=deletions, insertions=np.empty((0, 2), dtype=np.int64))


def perturb(graph: InteractionGraph, disc: Discriminator, alpha: float,
            select_fraction: float, user_emb: np.ndarray, item_emb: np.ndarray,
            rng: np.random.Generator, *, steps: int = 1, lr: float = 0.001,
            adam: DiscriminatorAdam | None = None,
            epoch: int = 0) -> tuple[PerturbedGraph, EditPlan]:
    """Full per-epoch structure pass: sample -> train D -> select -> apply.

    alpha=0 short-circuits to an untouched copy of the original graph.
    """
    candidates = sample_candidates(graph, alpha, rng)
    if candidates.size == 0:
        plan = EditPlan.from_lists([], [])
        return apply_edits(graph, plan, epoch=epoch), plan
    train_discriminator(disc, candidates, user_emb, item_emb, steps, lr, adam=adam)
    plan = select_edits(disc, candidates, user_emb, item_emb, select_fraction)
    return apply_edits(graph, plan, epoch=epoch), plan
