"""Embedding tables and linear graph propagation.

A forward pass runs L rounds of symmetric-normalized neighborhood averaging,
optionally injecting an additive per-layer perturbation scaled by omega, and
merges all L+1 layers with a uniform mean. All layer tensors are retained so
gradients can be reverse-accumulated later.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import InteractionGraph


@dataclass
class EmbeddingTable:
    """Trainable layer-0 embeddings, stored in float32."""

    user_emb: np.ndarray  # (num_users, d) float32
    item_emb: np.ndarray  # (num_items, d) float32

    @property
    def d(self) -> int:
        return self.user_emb.shape[1]


def init_embeddings(num_users: int, num_items: int, d: int, rng: np.random.Generator) -> EmbeddingTable:
    """Xavier-style normal init: std = sqrt(2 / (d + d))."""
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    std = float(np.sqrt(2.0 / (d + d)))
    user = rng.normal(0.0, std, size=(num_users, d)).astype(np.float32)
    item = rng.normal(0.0, std, size=(num_items, d)).astype(np.float32)
    return EmbeddingTable(user_emb=user, item_emb=item)


@dataclass
class LayerPerturbations:
    """Static additive perturbations, one pair of arrays per propagated layer."""

    q_user: list  # L arrays, each (num_users, d)
    q_item: list
    omega: float

    def layer_perturbation(self, layer, user_block, item_block):
        return self.q_user[layer], self.q_item[layer]


@dataclass
class ForwardTrace:
    """All layer outputs of one propagation pass plus the merged result."""

    layers_user: list  # L+1 arrays (num_users, d) float64
    layers_item: list
    final_user: np.ndarray
    final_item: np.ndarray
    perturbed: bool
    graph: InteractionGraph = field(repr=False)
    graph_digest: str = ""

    @property
    def num_layers(self) -> int:
        return len(self.layers_user) - 1


def forward(graph: InteractionGraph, table: EmbeddingTable, num_layers: int,
            perturbations=None) -> ForwardTrace:
    """Propagate for `num_layers` rounds and mean-merge layers 0..L.

    `perturbations`, when given, must expose `.omega` and
    `.layer_perturbation(l, user_block, item_block) -> (q_user, q_item)`;
    layer l's perturbation is computed from layer l's blocks and added into
    layer l+1. omega == 0 skips the perturbation entirely, so the trace is
    bit-identical to an unperturbed pass.
    """
    if table.user_emb.shape[0] != graph.num_users or table.item_emb.shape[0] != graph.num_items:
        raise ValueError(
            f"table shapes {table.user_emb.shape[0]}x{table.item_emb.shape[0]} do not match "
            f"graph {graph.num_users}x{graph.num_items}"
        )
    p_ui, p_iu = graph.propagation_matrices()
    cur_u = table.user_emb.astype(np.float64)
    cur_i = table.item_emb.astype(np.float64)
    layers_u = [cur_u]
    layers_i = [cur_i]
    active = perturbations is not None and perturbations.omega != 0.0
    for layer in range(num_layers):
        nxt_u = p_ui @ cur_i
        nxt_i = p_iu @ cur_u
        if active:
            q_u, q_i = perturbations.layer_perturbation(layer, cur_u, cur_i)
            if q_u.shape != cur_u.shape or q_i.shape != cur_i.shape:
                raise ValueError(f"perturbation shapes at layer {layer} do not match blocks")
            nxt_u = nxt_u + perturbations.omega * q_u
            nxt_i = nxt_i + perturbations.omega * q_i
        cur_u, cur_i = nxt_u, nxt_i
        layers_u.append(cur_u)
        layers_i.append(cur_i)
    scale = 1.0 / (num_layers + 1)
    final_u = scale * sum(layers_u)
    final_i = scale * sum(layers_i)
    return ForwardTrace(
        layers_user=layers_u,
        layers_item=layers_i,
        final_user=final_u,
        final_item=final_i,
        perturbed=active,
        graph=graph,
        graph_digest=graph.digest,
    )


def score(trace: ForwardTrace, u: int, i: int) -> float:
    """Preference score: inner product of merged user and item embeddings."""
    return float(trace.final_user[u] @ trace.final_item[i])


def rank_items(trace: ForwardTrace, u: int, exclude=None, top_n: int = 10) -> np.ndarray:
    """Top-N items for user u by descending score, ties by ascending index.

    Excluded items are removed before the cutoff.
    """
    scores = trace.final_item @ trace.final_user[u]
    if exclude is not None and len(exclude):
        keep = np.ones(scores.shape[0], dtype=bool)
        keep[np.asarray(list(exclude), dtype=np.int64)] = False
        candidates = np.flatnonzero(keep)
        scores = scores[candidates]
    else:
        candidates = np.arange(scores.shape[0])
    order = np.argsort(-scores, kind="stable")
    return candidates[order[:top_n]]
