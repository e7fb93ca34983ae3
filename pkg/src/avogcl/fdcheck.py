"""Finite-difference verification of every analytic gradient path.

Small random instances are built per training mode, the pipeline's gradients
are compared entry-by-entry against central differences of the actual loss,
and the worst relative error per tensor is reported. Instances are built in
float64 end to end so the comparison measures the math, not storage
rounding. Modes with non-smooth perturbations (sign-constrained noise,
ReLU) are rejected and redrawn when any kink lies within the probe step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import BprBatch
from .embedding_adv import ProjectionPerturbator
from .encoder import EmbeddingTable, forward
from .engine import MODES, NoisePerturbations, make_noise_perturbations
from .graph import InteractionGraph, apply_edits, build_graph
from .losses import TraceGrads, backward, joint_loss
from .rng import named_stream
from .structure import Discriminator, bce_loss_and_grads, init_discriminator, random_edits

H = 1e-4
REL_TOL = 1e-4
_FLOOR = 1e-4  # entries smaller than this are compared absolutely

_PROJECTION = {"avogcl": "prev_and_layer", "adv_epoch": "prev_only",
               "adv_layer": "layer_only"}
_NOISE = {"gaussian", "xsimgcl_uniform"}


def numeric_grad(fun, arr: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of a scalar function, entry by entry."""
    out = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        hi = fun()
        arr[idx] = orig - h
        lo = fun()
        arr[idx] = orig
        out[idx] = (hi - lo) / (2.0 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class FdInstance:
    mode: str
    graph: InteractionGraph
    table: EmbeddingTable  # float64 tables
    batch: BprBatch
    source: object | None  # perturbation source or None
    lambda1: float
    lambda2: float
    tau: float
    l_star: int
    num_layers: int

    @property
    def contrast(self) -> bool:
        return self.mode != "lightgcn"


def _random_graph(rng: np.random.Generator) -> InteractionGraph:
    num_users = int(rng.integers(4, 11))
    num_items = int(rng.integers(4, 11))
    edges = []
    for u in range(num_users):
        degree = int(rng.integers(1, 4))
        items = rng.choice(num_items, size=min(degree, num_items), replace=False)
        edges.extend((u, int(i)) for i in items)
    return build_graph(edges, num_users, num_items)


def _random_batch(graph: InteractionGraph, rng: np.random.Generator) -> BprBatch:
    size = int(rng.integers(6, 13))
    users_all, items_all = graph.edge_arrays()
    picked = rng.integers(0, graph.num_edges, size=size)
    users = users_all[picked]
    pos = items_all[picked]
    neg = np.empty(size, dtype=np.int64)
    for k in range(size):
        while True:
            j = int(rng.integers(0, graph.num_items))
            if not graph.has_edge(int(users[k]), j):
                neg[k] = j
                break
    return BprBatch(users=users, pos_items=pos, neg_items=neg)


def _sign_margin_ok(instance: FdInstance, margin: float) -> bool:
    """Reject instances where a sign() kink sits within the FD probe."""
    trace = forward(instance.graph, instance.table, instance.num_layers, instance.source)
    blocks = trace.layers_user[:-1] + trace.layers_item[:-1]
    return all(np.min(np.abs(b)) > margin for b in blocks)


def build_instance(mode: str, seed: int) -> FdInstance:
    """Deterministic random instance for one mode; redraws non-smooth cases."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    for attempt in range(64):
        rng = named_stream(seed + 1000 * attempt, f"fd_{mode}")
        graph = _random_graph(rng)
        d = int(rng.integers(2, 9))
        L = int(rng.integers(1, 4))
        l_star = int(rng.integers(1, L + 1))
        table = EmbeddingTable(
            user_emb=rng.normal(0.0, 0.4, size=(graph.num_users, d)),
            item_emb=rng.normal(0.0, 0.4, size=(graph.num_items, d)))
        batch = _random_batch(graph, rng)
        lambda1 = float(rng.uniform(0.2, 1.0))
        lambda2 = float(rng.uniform(1e-3, 1e-2))
        tau = float(rng.uniform(0.2, 0.6))
        omega = float(rng.uniform(0.1, 0.4))

        g_run = graph
        source: object | None = None
        if mode in _PROJECTION:
            budget = max(1, graph.num_edges // 10)
            plan = random_edits(graph, budget, budget, rng)
            g_run = apply_edits(graph, plan).graph
            source = ProjectionPerturbator(
                k_user=rng.normal(0.0, 1.0 / d, size=(d, d)),
                k_item=rng.normal(0.0, 1.0 / d, size=(d, d)),
                e_prev_user=rng.normal(0.0, 0.3, size=(graph.num_users, d)),
                e_prev_item=rng.normal(0.0, 0.3, size=(graph.num_items, d)),
                omega=omega, adv_lr=0.0, projection_mode=_PROJECTION[mode])
        elif mode in _NOISE:
            source = make_noise_perturbations(
                mode, graph.num_users, graph.num_items, d, L, omega, rng)
        elif mode in ("sgl_edge_drop", "sglc_curriculum"):
            drop_plan = random_edits(graph, max(1, graph.num_edges // 10), 0, rng)
            g_run = apply_edits(graph, drop_plan).graph

        # batches are drawn on the pristine graph; an edit may delete a batch
        # positive from the run graph, which BPR tolerates (it only reads
        # embeddings)
        instance = FdInstance(mode=mode, graph=g_run, table=table, batch=batch,
                              source=source, lambda1=lambda1, lambda2=lambda2,
                              tau=tau, l_star=l_star, num_layers=L)
        if isinstance(source, NoisePerturbations) and source.sign_constrained:
            if not _sign_margin_ok(instance, margin=50 * H):
                continue
        return instance
    raise RuntimeError(f"could not build a smooth instance for mode {mode}")


def _total_loss(instance: FdInstance) -> float:
    trace = forward(instance.graph, instance.table, instance.num_layers,
                    instance.source)
    breakdown, _, _, _ = joint_loss(
        trace, instance.batch, instance.lambda1, instance.lambda2, instance.tau,
        instance.l_star, contrast=instance.contrast)
    return breakdown.total


def _cl_loss(instance: FdInstance) -> float:
    trace = forward(instance.graph, instance.table, instance.num_layers,
                    instance.source)
    breakdown, _, _, _ = joint_loss(
        trace, instance.batch, instance.lambda1, instance.lambda2, instance.tau,
        instance.l_star, contrast=True)
    return breakdown.cl_user + breakdown.cl_item


def check_instance(instance: FdInstance) -> dict[str, float]:
    """Max relative error per gradient tensor on one instance."""
    trace = forward(instance.graph, instance.table, instance.num_layers, instance.source)
    _, bpr_g, cl_g, reg_g = joint_loss(
        trace, instance.batch, instance.lambda1, instance.lambda2, instance.tau,
        instance.l_star, contrast=instance.contrast)
    projection = instance.source if isinstance(instance.source, ProjectionPerturbator) else None
    theta_up = TraceGrads.weighted([
        (bpr_g, 1.0),
        (cl_g, instance.lambda1 if instance.contrast else 0.0),
        (reg_g, instance.lambda2),
    ])
    theta_buf = backward(trace, theta_up, projection)

    errors: dict[str, float] = {}
    fd_user = numeric_grad(lambda: _total_loss(instance), instance.table.user_emb)
    fd_item = numeric_grad(lambda: _total_loss(instance), instance.table.item_emb)
    errors["d_user_emb"] = max_relative_error(theta_buf.d_user_emb, fd_user)
    errors["d_item_emb"] = max_relative_error(theta_buf.d_item_emb, fd_item)

    if projection is not None and projection.omega != 0.0:
        cl_buf = backward(trace, cl_g, projection)
        fd_ku = numeric_grad(lambda: _cl_loss(instance), projection.k_user)
        fd_ki = numeric_grad(lambda: _cl_loss(instance), projection.k_item)
        errors["d_k_user"] = max_relative_error(cl_buf.d_k_user, fd_ku)
        errors["d_k_item"] = max_relative_error(cl_buf.d_k_item, fd_ki)
    return errors


def check_discriminator(seed: int) -> dict[str, float]:
    """FD check of the pair scorer's BCE gradients on a smooth fixture."""
    for attempt in range(64):
        rng = named_stream(seed + 1000 * attempt, "fd_disc")
        d = int(rng.integers(2, 5))
        n = int(rng.integers(6, 13))
        disc64 = _float64_discriminator(init_discriminator(d, rng))
        x = rng.normal(0.0, 1.0, size=(n, 2 * d))
        labels = (rng.random(n) < 0.5).astype(np.float64)
        pre = x @ disc64.w1 + disc64.b1
        if np.min(np.abs(pre)) <= 50 * H:
            continue
        _, grads = bce_loss_and_grads(disc64, x, labels)
        errors = {}
        for name, param, grad in zip(("w1", "b1", "w2", "b2"),
                                     disc64.params(), grads):
            fd = numeric_grad(lambda: bce_loss_and_grads(disc64, x, labels)[0], param)
            errors[f"disc_{name}"] = max_relative_error(grad, fd)
        return errors
    raise RuntimeError("could not build a smooth discriminator fixture")


def _float64_discriminator(disc: Discriminator) -> Discriminator:
    return Discriminator(w1=disc.w1.astype(np.float64), b1=disc.b1.astype(np.float64),
                         w2=disc.w2.astype(np.float64), b2=disc.b2.astype(np.float64))


def run_suite(instances_per_mode: int = 3, seed: int = 0,
              modes=MODES) -> list[tuple[str, dict[str, float]]]:
    """FD-check every mode plus the discriminator; returns (label, errors)."""
    results: list[tuple[str, dict[str, float]]] = []
    for mode in modes:
        for k in range(instances_per_mode):
            instance = build_instance(mode, seed=seed + 31 * k)
            results.append((f"{mode}[{k}]", check_instance(instance)))
    for k in range(2):
        results.append((f"discriminator[{k}]", check_discriminator(seed + 7 * k)))
    return results


def suite_passed(results) -> bool:
    return all(err <= REL_TOL for _, errors in results for err in errors.values())
