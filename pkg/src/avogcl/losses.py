"""Ranking, contrastive and regularization losses with analytic gradients.

Gradients are produced in two stages: each loss deposits its direct gradient
on the trace tensors it touches (the merged embedding, a contrast layer, or
layer 0) into a TraceGrads buffer, and `backward` reverse-accumulates those
through the propagation recurrence down to the layer-0 tables and, when the
projection perturbator was active in the forward pass, to its K matrices.
Everything here is checkable entry-by-entry against central finite
differences; the test suite does exactly that.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .embedding_adv import ProjectionPerturbator
from .encoder import ForwardTrace

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    bpr: float
    cl_user: float
    cl_item: float
    reg: float
    total: float
    lambda1: float
    lambda2: float
    tau: float

    @classmethod
    def assemble(cls, bpr, cl_user, cl_item, reg, lambda1, lambda2, tau):
        total = bpr + lambda1 * (cl_user + cl_item) + lambda2 * reg
        return cls(bpr, cl_user, cl_item, reg, total, lambda1, lambda2, tau)


class TraceGrads:
    """Direct gradient contributions on the tensors of one ForwardTrace."""

    def __init__(self, num_users: int, num_items: int, d: int):
        self.d_final_user = np.zeros((num_users, d))
        self.d_final_item = np.zeros((num_items, d))
        self.d_layer_user: dict[int, np.ndarray] = {}
        self.d_layer_item: dict[int, np.ndarray] = {}

    def layer_user(self, layer: int) -> np.ndarray:
        if layer not in self.d_layer_user:
            self.d_layer_user[layer] = np.zeros_like(self.d_final_user)
        return self.d_layer_user[layer]

    def layer_item(self, layer: int) -> np.ndarray:
        if layer not in self.d_layer_item:
            self.d_layer_item[layer] = np.zeros_like(self.d_final_item)
        return self.d_layer_item[layer]

    @classmethod
    def weighted(cls, parts) -> "TraceGrads":
        """New buffer equal to sum of (buffer, weight) pairs."""
        first = parts[0][0]
        out = cls(first.d_final_user.shape[0], first.d_final_item.shape[0],
                  first.d_final_user.shape[1])
        for buf, w in parts:
            if w == 0.0:
                continue
            out.d_final_user += w * buf.d_final_user
            out.d_final_item += w * buf.d_final_item
            for l, arr in buf.d_layer_user.items():
                out.layer_user(l)[...] += w * arr
            for l, arr in buf.d_layer_item.items():
                out.layer_item(l)[...] += w * arr
        return out


@dataclass
class GradBuffer:
    """Gradients of one scalar w.r.t. every trainable tensor."""

    d_user_emb: np.ndarray
    d_item_emb: np.ndarray
    d_k_user: np.ndarray | None = None
    d_k_item: np.ndarray | None = None
    d_discriminator: object | None = None


def bpr_loss(trace: ForwardTrace, batch, out: TraceGrads | None = None):
    """Pairwise ranking loss sum(-log sigmoid(y_ui - y_uj)) over the batch.

    Returns (loss, grads); grads accumulate into `out` when given. The
    sigmoid is never evaluated in a saturating form: the loss uses
    logaddexp(0, -x) and the gradient coefficient expit(x) - 1.
    """
    grads = out if out is not None else TraceGrads(
        trace.final_user.shape[0], trace.final_item.shape[0], trace.final_user.shape[1])
    u = batch.users
    i = batch.pos_items
    j = batch.neg_items
    fu = trace.final_user[u]
    gi = trace.final_item[i]
    gj = trace.final_item[j]
    x = np.einsum("bd,bd->b", fu, gi - gj)
    loss = float(np.logaddexp(0.0, -x).sum())
    coeff = (expit(x) - 1.0)[:, None]
    np.add.at(grads.d_final_user, u, coeff * (gi - gj))
    np.add.at(grads.d_final_item, i, coeff * fu)
    np.add.at(grads.d_final_item, j, -coeff * fu)
    return loss, grads


def _normalize_rows(mat: np.ndarray):
    norms = np.linalg.norm(mat, axis=1)
    zero = norms == 0.0
    if zero.any():
        log.warning("infonce: %d zero-norm rows, cosine treated as 0", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    return mat / safe[:, None], norms, zero


def _denormalize_grad(upstream, unit_rows, norms, zero):
    inner = np.einsum("nd,nd->n", upstream, unit_rows)
    grad = (upstream - inner[:, None] * unit_rows) / np.where(zero, 1.0, norms)[:, None]
    grad[zero] = 0.0
    return grad


def infonce_loss(view_a: np.ndarray, view_b: np.ndarray, nodes: np.ndarray, tau: float,
                 pool: np.ndarray | None = None):
    """Temperature-scaled contrastive loss between two views of `nodes`.

    For each node n: -log( exp(cos(a_n, b_n)/tau) / sum_k exp(cos(a_n, b_k)/tau) )
    with k over `pool` (defaults to `nodes`; pass all indices for the
    full-pool variant). Cosines use L2-normalized rows; a zero row scores 0
    against everything and receives no gradient. Returns
    (loss, d_view_a, d_view_b) with full-shape gradient arrays.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    nodes = np.asarray(nodes, dtype=np.int64)
    pool = nodes if pool is None else np.asarray(pool, dtype=np.int64)
    if np.any(np.diff(pool) < 0):
        raise ValueError("pool must be sorted")
    pos = np.searchsorted(pool, nodes)
    if pos.shape[0] and (pos[-1] >= pool.shape[0] or not np.array_equal(pool[pos], nodes)):
        raise ValueError("pool must contain every contrasted node")
    a_rows = view_a[nodes]
    b_rows = view_b[pool]
    a_hat, a_norm, a_zero = _normalize_rows(a_rows)
    b_hat, b_norm, b_zero = _normalize_rows(b_rows)
    sims = (a_hat @ b_hat.T) / tau
    row_max = sims.max(axis=1, keepdims=True) if sims.shape[1] else np.zeros((len(nodes), 1))
    lse = row_max[:, 0] + np.log(np.exp(sims - row_max).sum(axis=1))
    idx = np.arange(len(nodes))
    loss = float((lse - sims[idx, pos]).sum())
    weights = np.exp(sims - lse[:, None])
    weights[idx, pos] -= 1.0
    d_a_hat = (weights @ b_hat) / tau
    d_b_hat = (weights.T @ a_hat) / tau
    d_a = np.zeros_like(view_a)
    d_b = np.zeros_like(view_b)
    d_a[nodes] = _denormalize_grad(d_a_hat, a_hat, a_norm, a_zero)
    d_b[pool] = _denormalize_grad(d_b_hat, b_hat, b_norm, b_zero)
    return loss, d_a, d_b


def embedding_reg(trace: ForwardTrace, users: np.ndarray, items: np.ndarray,
                  out: TraceGrads | None = None):
    """Squared Frobenius norm of the layer-0 rows of the given node sets."""
    grads = out if out is not None else TraceGrads(
        trace.final_user.shape[0], trace.final_item.shape[0], trace.final_user.shape[1])
    e0_u = trace.layers_user[0]
    e0_i = trace.layers_item[0]
    loss = float((e0_u[users] ** 2).sum() + (e0_i[items] ** 2).sum())
    grads.layer_user(0)[users] += 2.0 * e0_u[users]
    grads.layer_item(0)[items] += 2.0 * e0_i[items]
    return loss, grads


def joint_loss(trace: ForwardTrace, batch, lambda1: float, lambda2: float, tau: float,
               l_star: int, contrast: bool = True,
               bpr_out: TraceGrads | None = None, cl_out: TraceGrads | None = None,
               reg_out: TraceGrads | None = None):
    """Full training objective for one batch.

    Contrastive views are the merged embedding against layer `l_star` of the
    same trace; the user loss runs over the batch's unique users, the item
    loss over its unique positive items. Regularization covers every
    batch-involved node (users, positives, negatives). Returns
    (LossBreakdown, bpr_grads, cl_grads, reg_grads); the grad buffers carry
    UNWEIGHTED per-term gradients so callers can weight them per consumer.
    """
    num_users = trace.final_user.shape[0]
    num_items = trace.final_item.shape[0]
    d = trace.final_user.shape[1]
    bpr_grads = bpr_out if bpr_out is not None else TraceGrads(num_users, num_items, d)
    cl_grads = cl_out if cl_out is not None else TraceGrads(num_users, num_items, d)
    reg_grads = reg_out if reg_out is not None else TraceGrads(num_users, num_items, d)

    bpr, _ = bpr_loss(trace, batch, out=bpr_grads)

    uniq_users = np.unique(batch.users)
    uniq_pos = np.unique(batch.pos_items)
    reg_items = np.unique(np.concatenate([batch.pos_items, batch.neg_items]))
    reg, _ = embedding_reg(trace, uniq_users, reg_items, out=reg_grads)

    cl_user = cl_item = 0.0
    if contrast:
        if not 1 <= l_star <= trace.num_layers:
            raise ValueError(f"contrast layer {l_star} outside 1..{trace.num_layers}")
        cl_user, da, db = infonce_loss(trace.final_user, trace.layers_user[l_star],
                                       uniq_users, tau)
        cl_grads.d_final_user += da
        cl_grads.layer_user(l_star)[...] += db
        cl_item, da, db = infonce_loss(trace.final_item, trace.layers_item[l_star],
                                       uniq_pos, tau)
        cl_grads.d_final_item += da
        cl_grads.layer_item(l_star)[...] += db

    breakdown = LossBreakdown.assemble(bpr, cl_user, cl_item, reg, lambda1, lambda2, tau)
    return breakdown, bpr_grads, cl_grads, reg_grads


def backward(trace: ForwardTrace, grads: TraceGrads,
             perturbator: ProjectionPerturbator | None = None) -> GradBuffer:
    """Reverse-accumulate TraceGrads through the propagation recurrence.

    Returns gradients w.r.t. the layer-0 tables and, when `perturbator` is
    the source that was active during the forward pass, w.r.t. its K
    matrices (the snapshot is a constant and never receives gradient).
    Constant additive noise needs no adjoint, so noise-based sources are
    simply not passed here.
    """
    L = trace.num_layers
    if len(trace.layers_user) != L + 1:
        raise ValueError("trace does not retain all layers")
    merge = 1.0 / (L + 1)
    p_ui, p_iu = trace.graph.propagation_matrices()

    def direct_u(l):
        out = merge * grads.d_final_user
        if l in grads.d_layer_user:
            out = out + grads.d_layer_user[l]
        return out

    def direct_i(l):
        out = merge * grads.d_final_item
        if l in grads.d_layer_item:
            out = out + grads.d_layer_item[l]
        return out

    active = perturbator is not None and perturbator.omega != 0.0
    d_kp_u = d_kp_i = None
    d_k_u = d_k_i = None
    kp_u = kp_i = None
    if active:
        mode = perturbator.projection_mode
        d = trace.final_user.shape[1]
        d_k_u = np.zeros((d, d))
        d_k_i = np.zeros((d, d))
        if mode in ("prev_and_layer", "prev_only"):
            kp_u = perturbator.mapped_projection("user")
            kp_i = perturbator.mapped_projection("item")
            d_kp_u = np.zeros_like(kp_u)
            d_kp_i = np.zeros_like(kp_i)

    acc_u = direct_u(L)
    acc_i = direct_i(L)
    for l in range(L - 1, -1, -1):
        new_u = direct_u(l) + p_ui @ acc_i
        new_i = direct_i(l) + p_iu @ acc_u
        if active:
            w = perturbator.omega
            up_u = w * acc_u
            up_i = w * acc_i
            e_u = trace.layers_user[l]
            e_i = trace.layers_item[l]
            if perturbator.projection_mode == "prev_and_layer":
                m_u = kp_u.T @ e_u
                m_i = kp_i.T @ e_i
                new_u += kp_u @ (kp_u.T @ up_u)
                new_i += kp_i @ (kp_i.T @ up_i)
                d_kp_u += up_u @ m_u.T + e_u @ (up_u.T @ kp_u)
                d_kp_i += up_i @ m_i.T + e_i @ (up_i.T @ kp_i)
            elif perturbator.projection_mode == "prev_only":
                t_u = perturbator.e_prev_user.astype(np.float64)
                t_i = perturbator.e_prev_item.astype(np.float64)
                d_kp_u += up_u @ (kp_u.T @ t_u).T + t_u @ (up_u.T @ kp_u)
                d_kp_i += up_i @ (kp_i.T @ t_i).T + t_i @ (up_i.T @ kp_i)
            else:  # layer_only
                k_u = perturbator.k_user.astype(np.float64)
                k_i = perturbator.k_item.astype(np.float64)
                f_u = e_u @ k_u
                f_i = e_i @ k_i
                df_u = up_u @ (f_u.T @ e_u).T + e_u @ (up_u.T @ f_u)
                df_i = up_i @ (f_i.T @ e_i).T + e_i @ (up_i.T @ f_i)
                new_u += f_u @ (f_u.T @ up_u) + df_u @ k_u.T
                new_i += f_i @ (f_i.T @ up_i) + df_i @ k_i.T
                d_k_u += e_u.T @ df_u
                d_k_i += e_i.T @ df_i
        acc_u, acc_i = new_u, new_i

    if active and perturbator.projection_mode in ("prev_and_layer", "prev_only"):
        d_k_u = perturbator.e_prev_user.astype(np.float64).T @ d_kp_u
        d_k_i = perturbator.e_prev_item.astype(np.float64).T @ d_kp_i

    return GradBuffer(d_user_emb=acc_u, d_item_emb=acc_i, d_k_user=d_k_u, d_k_item=d_k_i)
