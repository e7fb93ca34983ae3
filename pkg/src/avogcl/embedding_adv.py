"""Trainable embedding perturbator.

Maintains one d x d projection matrix per side plus a frozen snapshot of the
previous epoch's merged embeddings. The per-layer perturbation is
Q^l = K'(K'^T E^l) with K' = E_prev K, evaluated inner-product-first so the
cost stays O(N d^2). The K matrices are updated by gradient ascent on the
contrastive loss; the snapshot never receives gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .encoder import ForwardTrace

log = logging.getLogger(__name__)

# Q construction variants: both factors, snapshot only, current layer only.
PROJECTION_MODES = ("prev_and_layer", "prev_only", "layer_only")

GRAD_CLIP_NORM = 5.0


@dataclass
class ProjectionPerturbator:
    k_user: np.ndarray  # (d, d) float32
    k_item: np.ndarray
    e_prev_user: np.ndarray  # (num_users, d) float32, frozen snapshot
    e_prev_item: np.ndarray
    omega: float
    adv_lr: float
    projection_mode: str = "prev_and_layer"

    def __post_init__(self):
        if self.projection_mode not in PROJECTION_MODES:
            raise ValueError(f"unknown projection mode {self.projection_mode!r}")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")

    def mapped_projection(self, side: str) -> np.ndarray:
        """K' = E_prev K for the given side, in float64."""
        if side == "user":
            return self.e_prev_user.astype(np.float64) @ self.k_user.astype(np.float64)
        return self.e_prev_item.astype(np.float64) @ self.k_item.astype(np.float64)

    def layer_perturbation(self, layer, user_block, item_block):
        q_u = compute_layer_perturbation(self, "user", user_block)
        q_i = compute_layer_perturbation(self, "item", item_block)
        return q_u, q_i


def init_perturbator(num_users: int, num_items: int, d: int, omega: float, adv_lr: float,
                     rng: np.random.Generator,
                     projection_mode: str = "prev_and_layer") -> ProjectionPerturbator:
    """K entries ~ N(0, 1/d) so the initial perturbation is small; the
    snapshot starts at zero and is overwritten by the bootstrap pass."""
    std = 1.0 / d
    return ProjectionPerturbator(
        k_user=rng.normal(0.0, std, size=(d, d)).astype(np.float32),
        k_item=rng.normal(0.0, std, size=(d, d)).astype(np.float32),
        e_prev_user=np.zeros((num_users, d), dtype=np.float32),
        e_prev_item=np.zeros((num_items, d), dtype=np.float32),
        omega=omega,
        adv_lr=adv_lr,
        projection_mode=projection_mode,
    )


def snapshot_targets(pert: ProjectionPerturbator, trace: ForwardTrace) -> ProjectionPerturbator:
    """Store trace.final as the new frozen target; overwrites the previous one."""
    if trace.final_user.shape != pert.e_prev_user.shape or trace.final_item.shape != pert.e_prev_item.shape:
        raise ValueError("trace shapes do not match perturbator snapshot shapes")
    pert.e_prev_user = trace.final_user.astype(np.float32)
    pert.e_prev_item = trace.final_item.astype(np.float32)
    return pert


def compute_layer_perturbation(pert: ProjectionPerturbator, side: str, layer_block: np.ndarray) -> np.ndarray:
    """Perturbation for one layer of one side, before omega scaling."""
    mode = pert.projection_mode
    if mode == "layer_only":
        k = (pert.k_user if side == "user" else pert.k_item).astype(np.float64)
        mapped = layer_block @ k
        return mapped @ (mapped.T @ layer_block)
    mapped = pert.mapped_projection(side)
    if mode == "prev_only":
        target = (pert.e_prev_user if side == "user" else pert.e_prev_item).astype(np.float64)
        return mapped @ (mapped.T @ target)
    return mapped @ (mapped.T @ layer_block)


def adversarial_step(pert: ProjectionPerturbator, d_k_user: np.ndarray,
                     d_k_item: np.ndarray) -> ProjectionPerturbator:
    """One gradient-ascent step on both K matrices.

    Gradients are jointly clipped to global norm 5.0; a non-finite gradient
    skips the step with a warning. The model parameters are untouched.
    """
    gu = np.asarray(d_k_user, dtype=np.float64)
    gi = np.asarray(d_k_item, dtype=np.float64)
    if not (np.isfinite(gu).all() and np.isfinite(gi).all()):
        log.warning("non-finite perturbator gradient; ascent step skipped")
        return pert
    norm = float(np.sqrt((gu * gu).sum() + (gi * gi).sum()))
    if norm > GRAD_CLIP_NORM:
        scale = GRAD_CLIP_NORM / norm
        gu = gu * scale
        gi = gi * scale
    pert.k_user = (pert.k_user.astype(np.float64) + pert.adv_lr * gu).astype(np.float32)
    pert.k_item = (pert.k_item.astype(np.float64) + pert.adv_lr * gi).astype(np.float32)
    return pert
