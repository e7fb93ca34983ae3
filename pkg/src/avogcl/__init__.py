"""Adversarial-view graph contrastive learning for implicit-feedback recommendation.

A LightGCN-style encoder trained with BPR plus an InfoNCE term whose second
view is produced by two learned adversaries: a discriminator-guided graph
editor and a projection-based per-layer embedding perturbation, both pushed
to make the contrast harder as training progresses. Baseline view
constructions (random edge drop, curriculum edge drop, uniform/Gaussian
noise) are available as modes for ablation.
"""

from .data import (BprBatch, DatasetSplit, RawInteraction, ingest, kcore_filter,
                   load_split, sample_bpr_batch, split, write_split)
from .embedding_adv import (ProjectionPerturbator, adversarial_step,
                            compute_layer_perturbation, init_perturbator,
                            snapshot_targets)
from .encoder import (EmbeddingTable, ForwardTrace, LayerPerturbations, forward,
                      init_embeddings, rank_items, score)
from .engine import (EpochReport, TrainConfig, TrainResult, TrainState,
                     curriculum_drop_ratio, early_stop, load_checkpoint,
                     save_checkpoint, state_from_checkpoint, train)
from .graph import (EditPlan, GraphError, InteractionGraph, PerturbedGraph,
                    apply_edits, build_graph, normalized_coefficient)
from .losses import (GradBuffer, LossBreakdown, TraceGrads, backward, bpr_loss,
                     embedding_reg, infonce_loss, joint_loss)
from .metrics import (EvalReport, evaluate_full_ranking, inject_noise, ndcg_at,
                      recall_at, sparsity_buckets, view_similarity)
from .optim import AdamState, adam_step
from .structure import (CandidateSets, Discriminator, discriminator_score,
                        init_discriminator, perturb, sample_candidates,
                        select_edits, train_discriminator)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BprBatch", "CandidateSets", "DatasetSplit", "Discriminator",
    "EditPlan", "EmbeddingTable", "EpochReport", "EvalReport", "ForwardTrace",
    "GradBuffer", "GraphError", "InteractionGraph", "LayerPerturbations",
    "LossBreakdown", "PerturbedGraph", "ProjectionPerturbator", "RawInteraction",
    "TraceGrads", "TrainConfig", "TrainResult", "TrainState", "adam_step",
    "adversarial_step", "apply_edits", "backward", "bpr_loss", "build_graph",
    "compute_layer_perturbation", "curriculum_drop_ratio", "discriminator_score",
    "early_stop", "embedding_reg", "evaluate_full_ranking", "forward",
    "infonce_loss", "ingest", "init_discriminator", "init_embeddings",
    "init_perturbator", "inject_noise", "joint_loss", "kcore_filter",
    "load_checkpoint", "load_split", "ndcg_at", "normalized_coefficient",
    "perturb", "rank_items", "recall_at", "sample_bpr_batch",
    "sample_candidates", "save_checkpoint", "score", "select_edits",
    "snapshot_targets", "sparsity_buckets", "split", "state_from_checkpoint",
    "train", "train_discriminator", "view_similarity", "write_split",
]
