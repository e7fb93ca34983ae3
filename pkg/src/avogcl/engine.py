"""Training orchestration: config, epoch loop, Adam, early stopping, checkpoints.

One epoch performs, in order: build this epoch's edited graph from the
pristine train graph, run a single perturbed forward pass, accumulate batch
losses and their trace gradients, take one ascent step on the perturbation
projections (maximizing the contrastive term), one Adam descent step on the
embedding tables (minimizing the joint loss), snapshot the epoch's merged
embeddings as the next epoch's reference, and periodically validate with
full ranking on the clean graph. Both adversarial updates and the descent
consume the same loss evaluation; nothing is recomputed after K moves.

All persistent state is float32 and round-trips bit-exactly through the
checkpoint format, so a resumed run continues the exact metric stream of an
uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BprBatch, DatasetSplit, sample_bpr_batch
from .embedding_adv import (ProjectionPerturbator, adversarial_step,
                            init_perturbator, snapshot_targets)
from .encoder import EmbeddingTable, ForwardTrace, forward, init_embeddings
from .graph import EditPlan, InteractionGraph, apply_edits
from .losses import LossBreakdown, TraceGrads, backward, joint_loss
from .metrics import EvalReport, evaluate_full_ranking, view_similarity
from .optim import AdamState, adam_step
from .rng import generator_state, named_stream, restore_generator
from .structure import (Discriminator, DiscriminatorAdam, init_discriminator,
                        random_deletion_plan, sample_candidates, select_edits,
                        train_discriminator)

log = logging.getLogger(__name__)

MODES = ("lightgcn", "sgl_edge_drop", "sglc_curriculum", "xsimgcl_uniform",
         "gaussian", "adv_epoch", "adv_layer", "avogcl")

# modes whose graph edits are discriminator-guided vs plain random dropout
_GUIDED_STRUCTURE = frozenset({"avogcl", "adv_epoch", "adv_layer", "gaussian"})
_RANDOM_DROP = frozenset({"sgl_edge_drop", "sglc_curriculum"})
# modes whose layer perturbations come from the trainable projections
_PROJECTION_MODE = {"avogcl": "prev_and_layer", "adv_epoch": "prev_only",
                    "adv_layer": "layer_only"}
_NOISE_MODES = frozenset({"xsimgcl_uniform", "gaussian"})

CHECKPOINT_MAGIC = b"AVGC"
CHECKPOINT_VERSION = 1
EARLY_STOP_N = 20
DIVERGENCE_FACTOR = 100.0


@dataclass
class TrainConfig:
    d: int = 64
    L: int = 2
    lr: float = 0.001
    adv_lr: float = 0.001
    batch_size: int = 4096
    max_epochs: int = 200
    patience: int = 10
    lambda1: float = 0.5
    lambda2: float = 1e-4
    tau: float = 0.2
    alpha: float = 0.03
    omega: float = 0.02
    select_fraction: float = 0.5
    l_star: int = 1
    mode: str = "avogcl"
    structure_perturb: bool = True
    embed_perturb: bool = True
    seed: int = 0
    eval_every: int = 1
    topk_list: tuple[int, ...] = (10, 20)

    def validate(self) -> None:
        problems = []
        if self.d < 1:
            problems.append(f"d must be >= 1, got {self.d}")
        if self.L < 1:
            problems.append(f"L must be >= 1, got {self.L}")
        if self.lr <= 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if self.adv_lr <= 0:
            problems.append(f"adv_lr must be > 0, got {self.adv_lr}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            problems.append(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if self.tau <= 0:
            problems.append(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.omega < 0:
            problems.append(f"omega must be >= 0, got {self.omega}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append("lambda1 and lambda2 must be >= 0")
        if not 0.0 < self.select_fraction <= 1.0:
            problems.append(
                f"select_fraction must lie in (0, 1], got {self.select_fraction}")
        if not 1 <= self.l_star <= self.L:
            problems.append(f"l_star must lie in 1..L={self.L}, got {self.l_star}")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if not self.topk_list or any(n < 1 for n in self.topk_list):
            problems.append(f"topk_list must be positive cutoffs, got {self.topk_list}")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["topk_list"] = list(self.topk_list)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown config key: {key}")
            values[key] = _coerce(key, raw, known[key].type)
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a flat key=value file; '#' starts a comment."""
        mapping = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {body!r}")
                key, value = body.split("=", 1)
                mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)


_BOOL_WORDS = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}


def _coerce(key: str, raw, annotation) -> object:
    if not isinstance(raw, str):
        return tuple(raw) if key == "topk_list" else raw
    text = raw.strip()
    if key in ("structure_perturb", "embed_perturb"):
        word = text.lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"config key {key}: expected on/off, got {text!r}")
        return _BOOL_WORDS[word]
    if key == "topk_list":
        return tuple(int(part) for part in text.split(",") if part.strip())
    if key == "mode":
        return text
    if key in ("d", "L", "batch_size", "max_epochs", "patience", "l_star",
               "seed", "eval_every"):
        return int(text)
    return float(text)


def curriculum_drop_ratio(epoch: int, total_epochs: int, target_ratio: float) -> float:
    """Linear ramp 0 -> target over the first half of training, then flat."""
    if not 0.0 <= target_ratio <= 1.0:
        raise ValueError(f"target ratio must lie in [0, 1], got {target_ratio}")
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    half = total_epochs / 2.0
    return target_ratio * min(1.0, epoch / half)


def early_stop(history, patience: int) -> bool:
    """True when the running best has gone `patience` evaluations unimproved."""
    best = -np.inf
    stale = 0
    for value in history:
        if value > best:
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience


@dataclass
class EarlyStopper:
    patience: int
    best: float = -np.inf
    best_epoch: int = 0
    stale: int = 0

    def update(self, value: float, epoch: int) -> str:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return "improved"
        self.stale += 1
        return "stop" if self.stale >= self.patience else "wait"


@dataclass
class NoisePerturbations:
    """Per-layer additive noise, drawn once per epoch.

    Sign-constrained noise flips each pre-drawn magnitude row into the
    orthant of the node's current layer embedding.
    """

    mags_user: list
    mags_item: list
    omega: float
    sign_constrained: bool

    def layer_perturbation(self, layer, user_block, item_block):
        if self.sign_constrained:
            return (np.sign(user_block) * self.mags_user[layer],
                    np.sign(item_block) * self.mags_item[layer])
        return self.mags_user[layer], self.mags_item[layer]


def make_noise_perturbations(mode: str, num_users: int, num_items: int, d: int,
                             num_layers: int, omega: float,
                             rng: np.random.Generator) -> NoisePerturbations:
    mags_user = []
    mags_item = []
    for _ in range(num_layers):
        if mode == "gaussian":
            mags_user.append(rng.normal(size=(num_users, d)))
            mags_item.append(rng.normal(size=(num_items, d)))
        elif mode == "xsimgcl_uniform":
            for target, count in ((mags_user, num_users), (mags_item, num_items)):
                raw = rng.random((count, d))
                norms = np.linalg.norm(raw, axis=1, keepdims=True)
                target.append(raw / np.maximum(norms, 1e-12))
        else:
            raise ValueError(f"not a noise mode: {mode}")
    return NoisePerturbations(mags_user=mags_user, mags_item=mags_item,
                              omega=omega, sign_constrained=mode == "xsimgcl_uniform")


@dataclass
class EpochReport:
    epoch: int
    losses: LossBreakdown
    val_metrics: dict[str, float]
    wall_time: float
    edits_deleted: int
    edits_inserted: int
    view_similarity: float

    def to_json_dict(self) -> dict:
        # wall time is intentionally excluded: the log must be byte-stable
        # across runs of the same seed
        out = {
            "epoch": self.epoch,
            "bpr": self.losses.bpr,
            "cl_user": self.losses.cl_user,
            "cl_item": self.losses.cl_item,
            "reg": self.losses.reg,
            "total": self.losses.total,
            "edits_deleted": self.edits_deleted,
            "edits_inserted": self.edits_inserted,
            "view_similarity": self.view_similarity,
        }
        if self.val_metrics:
            out["val"] = dict(sorted(self.val_metrics.items()))
        return out


@dataclass
class TrainState:
    epoch: int
    table: EmbeddingTable
    adam_user: AdamState
    adam_item: AdamState
    prev_user: np.ndarray
    prev_item: np.ndarray
    perturbator: ProjectionPerturbator | None
    disc: Discriminator | None
    disc_adam: DiscriminatorAdam | None
    stopper: EarlyStopper
    first_total: float
    rng_sampling: np.random.Generator
    rng_structure: np.random.Generator
    rng_noise: np.random.Generator


@dataclass
class TrainResult:
    table: EmbeddingTable          # best-validation tables (final if never validated)
    reports: list[EpochReport]
    best_epoch: int
    best_value: float
    state: TrainState
    aborted: bool = False


def _fresh_state(config: TrainConfig, split: DatasetSplit) -> TrainState:
    init_rng = named_stream(config.seed, "init")
    table = init_embeddings(split.num_users, split.num_items, config.d, init_rng)
    perturbator = None
    disc = None
    disc_adam = None
    if config.mode in _PROJECTION_MODE and config.embed_perturb:
        perturbator = init_perturbator(
            split.num_users, split.num_items, config.d, config.omega, config.adv_lr,
            named_stream(config.seed, "perturb_init"),
            projection_mode=_PROJECTION_MODE[config.mode])
    if config.mode in _GUIDED_STRUCTURE and config.structure_perturb and config.alpha > 0:
        disc = init_discriminator(config.d, named_stream(config.seed, "disc_init"))
        disc_adam = DiscriminatorAdam.for_discriminator(disc)
    return TrainState(
        epoch=0,
        table=table,
        adam_user=AdamState.for_param(table.user_emb),
        adam_item=AdamState.for_param(table.item_emb),
        prev_user=np.zeros_like(table.user_emb),
        prev_item=np.zeros_like(table.item_emb),
        perturbator=perturbator,
        disc=disc,
        disc_adam=disc_adam,
        stopper=EarlyStopper(patience=config.patience),
        first_total=float("nan"),
        rng_sampling=named_stream(config.seed, "sampling"),
        rng_structure=named_stream(config.seed, "structure"),
        rng_noise=named_stream(config.seed, "noise"),
    )


def _build_epoch_graph(config: TrainConfig, graph: InteractionGraph, epoch: int,
                       state: TrainState) -> tuple[InteractionGraph, EditPlan]:
    empty = EditPlan.from_lists([], [])
    if not config.structure_perturb:
        return graph, empty
    if config.mode in _GUIDED_STRUCTURE and config.alpha > 0:
        cands = sample_candidates(graph, config.alpha, state.rng_structure)
        if cands.size == 0:
            return graph, empty
        train_discriminator(state.disc, cands, state.prev_user, state.prev_item,
                            steps=1, lr=config.adv_lr, adam=state.disc_adam)
        plan = select_edits(state.disc, cands, state.prev_user, state.prev_item,
                            config.select_fraction)
        return apply_edits(graph, plan, epoch=epoch).graph, plan
    if config.mode in _RANDOM_DROP:
        if config.mode == "sglc_curriculum":
            ratio = curriculum_drop_ratio(epoch - 1, config.max_epochs, config.alpha)
        else:
            ratio = config.alpha
        plan = random_deletion_plan(graph, ratio, state.rng_structure)
        if plan.deletions.shape[0] == 0:
            return graph, empty
        return apply_edits(graph, plan, epoch=epoch).graph, plan
    return graph, empty


def _epoch_perturbations(config: TrainConfig, split: DatasetSplit, state: TrainState):
    if state.perturbator is not None:
        return state.perturbator
    if config.mode in _NOISE_MODES and config.embed_perturb:
        return make_noise_perturbations(
            config.mode, split.num_users, split.num_items, config.d, config.L,
            config.omega, state.rng_noise)
    return None


def train(config: TrainConfig, split: DatasetSplit, out_dir: str | Path | None = None,
          state: TrainState | None = None) -> TrainResult:
    """Run the full epoch loop; resumes from `state` when given.

    When `out_dir` is set, writes logs/metrics.jsonl (appending on resume)
    and checkpoints/{last,best}.ckpt.
    """
    config.validate()
    graph = split.train_graph()
    resuming = state is not None
    if state is None:
        state = _fresh_state(config, split)
    contrast = config.mode != "lightgcn"
    num_batches = max(1, int(np.ceil(len(split.train) / config.batch_size)))
    topk_eval = tuple(sorted(set(config.topk_list) | {EARLY_STOP_N}))

    jsonl = None
    ckpt_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        jsonl = open(out / "logs" / "metrics.jsonl", "a" if resuming else "w",
                     encoding="utf-8")

    reports: list[EpochReport] = []
    best_table = (state.table.user_emb.copy(), state.table.item_emb.copy())
    aborted = False
    try:
        if state.epoch == 0:
            # no previous epoch exists yet: one perturbation-free pass seeds
            # the reference embeddings for both adversaries
            boot = forward(graph, state.table, config.L)
            state.prev_user = boot.final_user.astype(np.float32)
            state.prev_item = boot.final_item.astype(np.float32)
            if state.perturbator is not None:
                snapshot_targets(state.perturbator, boot)

        stop = False
        while state.epoch < config.max_epochs and not stop:
            epoch = state.epoch + 1
            started = time.perf_counter()

            g_epoch, plan = _build_epoch_graph(config, graph, epoch, state)
            source = _epoch_perturbations(config, split, state)
            trace = forward(g_epoch, state.table, config.L, source)

            bpr_g = TraceGrads(split.num_users, split.num_items, config.d)
            cl_g = TraceGrads(split.num_users, split.num_items, config.d)
            reg_g = TraceGrads(split.num_users, split.num_items, config.d)
            sums = np.zeros(4)  # bpr, cl_user, cl_item, reg
            for _ in range(num_batches):
                batch = sample_bpr_batch(graph, config.batch_size, state.rng_sampling)
                breakdown, _, _, _ = joint_loss(
                    trace, batch, config.lambda1, config.lambda2, config.tau,
                    config.l_star, contrast=contrast,
                    bpr_out=bpr_g, cl_out=cl_g, reg_out=reg_g)
                sums += (breakdown.bpr, breakdown.cl_user, breakdown.cl_item,
                         breakdown.reg)
            losses = LossBreakdown.assemble(sums[0], sums[1], sums[2], sums[3],
                                            config.lambda1, config.lambda2, config.tau)

            if not np.isfinite(losses.total):
                log.error("epoch %d: non-finite loss, aborting before update", epoch)
                aborted = True
                break
            if np.isfinite(state.first_total) and abs(losses.total) > \
                    DIVERGENCE_FACTOR * max(abs(state.first_total), 1e-12):
                log.error("epoch %d: loss diverged (%.3g vs first %.3g), aborting",
                          epoch, losses.total, state.first_total)
                aborted = True
                break
            if not np.isfinite(state.first_total):
                state.first_total = losses.total

            projection_active = (state.perturbator is not None
                                 and state.perturbator.omega != 0.0
                                 and trace.perturbed)
            adjoint_source = state.perturbator if projection_active else None
            theta_up = TraceGrads.weighted([
                (bpr_g, 1.0),
                (cl_g, config.lambda1 if contrast else 0.0),
                (reg_g, config.lambda2),
            ])
            theta_buf = backward(trace, theta_up, adjoint_source)
            if projection_active and contrast:
                cl_buf = backward(trace, cl_g, adjoint_source)
                adversarial_step(state.perturbator, cl_buf.d_k_user, cl_buf.d_k_item)

            adam_step(state.table.user_emb, theta_buf.d_user_emb, state.adam_user, config.lr)
            adam_step(state.table.item_emb, theta_buf.d_item_emb, state.adam_item, config.lr)

            state.prev_user = trace.final_user.astype(np.float32)
            state.prev_item = trace.final_item.astype(np.float32)
            if state.perturbator is not None:
                snapshot_targets(state.perturbator, trace)

            sim = _trace_view_similarity(trace, config.l_star)
            val_metrics: dict[str, float] = {}
            if epoch % config.eval_every == 0:
                val_trace = forward(graph, state.table, config.L)
                report = evaluate_full_ranking(val_trace, split, "val", topk_eval)
                for n in topk_eval:
                    val_metrics[f"recall@{n}"] = report.recall[n]
                    val_metrics[f"ndcg@{n}"] = report.ndcg[n]
                verdict = state.stopper.update(val_metrics[f"recall@{EARLY_STOP_N}"], epoch)
                if verdict == "improved":
                    best_table = (state.table.user_emb.copy(),
                                  state.table.item_emb.copy())
                    if ckpt_dir is not None:
                        state.epoch = epoch
                        save_checkpoint(state, config, ckpt_dir / "best.ckpt")
                elif verdict == "stop":
                    stop = True

            state.epoch = epoch
            reports.append(EpochReport(
                epoch=epoch,
                losses=losses,
                val_metrics=val_metrics,
                wall_time=time.perf_counter() - started,
                edits_deleted=int(plan.deletions.shape[0]),
                edits_inserted=int(plan.insertions.shape[0]),
                view_similarity=sim,
            ))
            if jsonl is not None:
                jsonl.write(json.dumps(reports[-1].to_json_dict(), sort_keys=True) + "\n")
                jsonl.flush()
            if ckpt_dir is not None:
                save_checkpoint(state, config, ckpt_dir / "last.ckpt")
    finally:
        if jsonl is not None:
            jsonl.close()

    best = EmbeddingTable(user_emb=best_table[0], item_emb=best_table[1])
    if state.stopper.best_epoch == 0:
        best = EmbeddingTable(user_emb=state.table.user_emb.copy(),
                              item_emb=state.table.item_emb.copy())
    return TrainResult(
        table=best,
        reports=reports,
        best_epoch=state.stopper.best_epoch,
        best_value=state.stopper.best,
        state=state,
        aborted=aborted,
    )


def _trace_view_similarity(trace: ForwardTrace, l_star: int) -> float:
    final = np.concatenate([trace.final_user, trace.final_item], axis=0)
    layer = np.concatenate([trace.layers_user[l_star], trace.layers_item[l_star]], axis=0)
    return view_similarity(final, layer)


# --- checkpoint serialization ----------------------------------------------

_FLAG_PERTURBATOR = 1
_FLAG_DISCRIMINATOR = 2


def _state_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    arrays = [
        ("user_emb", state.table.user_emb),
        ("item_emb", state.table.item_emb),
        ("adam_user_m", state.adam_user.m),
        ("adam_user_v", state.adam_user.v),
        ("adam_item_m", state.adam_item.m),
        ("adam_item_v", state.adam_item.v),
        ("prev_user", state.prev_user),
        ("prev_item", state.prev_item),
    ]
    if state.perturbator is not None:
        arrays += [("k_user", state.perturbator.k_user),
                   ("k_item", state.perturbator.k_item)]
    if state.disc is not None:
        arrays += list(zip(("disc_w1", "disc_b1", "disc_w2", "disc_b2"),
                           state.disc.params()))
        for name, adam in zip(("w1", "b1", "w2", "b2"), state.disc_adam.states):
            arrays += [(f"disc_adam_{name}_m", adam.m), (f"disc_adam_{name}_v", adam.v)]
    return arrays


def save_checkpoint(state: TrainState, config: TrainConfig, path: str | Path) -> None:
    """Binary snapshot of every persistent tensor plus rng stream states."""
    mode_bytes = config.mode.encode("utf-8")
    num_users = state.table.user_emb.shape[0]
    num_items = state.table.item_emb.shape[0]
    flags = 0
    if state.perturbator is not None:
        flags |= _FLAG_PERTURBATOR
    if state.disc is not None:
        flags |= _FLAG_DISCRIMINATOR
    disc_steps = [s.step for s in state.disc_adam.states] if state.disc_adam else [0] * 4
    scalars = struct.pack(
        "<9q2d",
        state.epoch, state.adam_user.step, state.adam_item.step,
        disc_steps[0], disc_steps[1], disc_steps[2], disc_steps[3],
        state.stopper.best_epoch, state.stopper.stale,
        state.stopper.best if np.isfinite(state.stopper.best) else float("-inf"),
        state.first_total,
    )
    rng_blob = json.dumps({
        "sampling": generator_state(state.rng_sampling),
        "structure": generator_state(state.rng_structure),
        "noise": generator_state(state.rng_noise),
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5I", CHECKPOINT_VERSION, num_users, num_items,
                             config.d, config.L))
        fh.write(struct.pack("<I", len(mode_bytes)))
        fh.write(mode_bytes)
        fh.write(struct.pack("<B", flags))
        for _, arr in _state_arrays(state):
            if arr.dtype != np.float32:
                raise ValueError("persistent state must be float32")
            fh.write(np.ascontiguousarray(arr).tobytes())
        fh.write(scalars)
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)


@dataclass
class CheckpointData:
    version: int
    num_users: int
    num_items: int
    d: int
    L: int
    mode: str
    arrays: dict[str, np.ndarray]
    scalars: dict[str, float]
    rng: dict[str, dict]


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError("truncated checkpoint file")
    return data


def _array_layout(flags: int, num_users: int, num_items: int, d: int):
    layout = [
        ("user_emb", (num_users, d)), ("item_emb", (num_items, d)),
        ("adam_user_m", (num_users, d)), ("adam_user_v", (num_users, d)),
        ("adam_item_m", (num_items, d)), ("adam_item_v", (num_items, d)),
        ("prev_user", (num_users, d)), ("prev_item", (num_items, d)),
    ]
    if flags & _FLAG_PERTURBATOR:
        layout += [("k_user", (d, d)), ("k_item", (d, d))]
    if flags & _FLAG_DISCRIMINATOR:
        disc_shapes = {"w1": (2 * d, d), "b1": (d,), "w2": (d,), "b2": (1,)}
        layout += [(f"disc_{n}", s) for n, s in disc_shapes.items()]
        for n, s in disc_shapes.items():
            layout += [(f"disc_adam_{n}_m", s), (f"disc_adam_{n}_v", s)]
    return layout


def load_checkpoint(path: str | Path) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        version, num_users, num_items, d, L = struct.unpack("<5I", _read_exact(fh, 20))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (mode_len,) = struct.unpack("<I", _read_exact(fh, 4))
        mode = _read_exact(fh, mode_len).decode("utf-8")
        (flags,) = struct.unpack("<B", _read_exact(fh, 1))
        arrays = {}
        for name, shape in _array_layout(flags, num_users, num_items, d):
            count = int(np.prod(shape))
            buf = _read_exact(fh, count * 4)
            arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        raw = struct.unpack("<9q2d", _read_exact(fh, 9 * 8 + 2 * 8))
        scalars = {
            "epoch": raw[0], "adam_user_step": raw[1], "adam_item_step": raw[2],
            "disc_step_w1": raw[3], "disc_step_b1": raw[4],
            "disc_step_w2": raw[5], "disc_step_b2": raw[6],
            "best_epoch": raw[7], "stale": raw[8],
            "best_recall": raw[9], "first_total": raw[10],
        }
        (rng_len,) = struct.unpack("<I", _read_exact(fh, 4))
        rng = json.loads(_read_exact(fh, rng_len).decode("utf-8"))
    return CheckpointData(version=version, num_users=num_users, num_items=num_items,
                          d=d, L=L, mode=mode, arrays=arrays, scalars=scalars, rng=rng)


def state_from_checkpoint(ckpt: CheckpointData, config: TrainConfig,
                          split: DatasetSplit) -> TrainState:
    """Rebuild a resumable TrainState; shape or mode mismatch is rejected."""
    if (ckpt.num_users, ckpt.num_items) != (split.num_users, split.num_items):
        raise ValueError(
            f"checkpoint graph {ckpt.num_users}x{ckpt.num_items} does not match "
            f"split {split.num_users}x{split.num_items}")
    if ckpt.d != config.d or ckpt.L != config.L:
        raise ValueError(
            f"checkpoint geometry d={ckpt.d} L={ckpt.L} does not match config "
            f"d={config.d} L={config.L}")
    if ckpt.mode != config.mode:
        raise ValueError(f"checkpoint mode {ckpt.mode!r} does not match config "
                         f"mode {config.mode!r}")
    a = ckpt.arrays
    s = ckpt.scalars
    table = EmbeddingTable(user_emb=a["user_emb"], item_emb=a["item_emb"])
    adam_user = AdamState(m=a["adam_user_m"], v=a["adam_user_v"],
                          step=int(s["adam_user_step"]))
    adam_item = AdamState(m=a["adam_item_m"], v=a["adam_item_v"],
                          step=int(s["adam_item_step"]))
    perturbator = None
    if "k_user" in a:
        perturbator = ProjectionPerturbator(
            k_user=a["k_user"], k_item=a["k_item"],
            e_prev_user=a["prev_user"].copy(), e_prev_item=a["prev_item"].copy(),
            omega=config.omega, adv_lr=config.adv_lr,
            projection_mode=_PROJECTION_MODE[config.mode])
    disc = None
    disc_adam = None
    if "disc_w1" in a:
        disc = Discriminator(w1=a["disc_w1"], b1=a["disc_b1"],
                             w2=a["disc_w2"], b2=a["disc_b2"])
        states = []
        for name in ("w1", "b1", "w2", "b2"):
            states.append(AdamState(m=a[f"disc_adam_{name}_m"],
                                    v=a[f"disc_adam_{name}_v"],
                                    step=int(s[f"disc_step_{name}"])))
        disc_adam = DiscriminatorAdam(states=tuple(states))
    stopper = EarlyStopper(patience=config.patience, best=float(s["best_recall"]),
                           best_epoch=int(s["best_epoch"]), stale=int(s["stale"]))
    return TrainState(
        epoch=int(s["epoch"]),
        table=table,
        adam_user=adam_user,
        adam_item=adam_item,
        prev_user=a["prev_user"],
        prev_item=a["prev_item"],
        perturbator=perturbator,
        disc=disc,
        disc_adam=disc_adam,
        stopper=stopper,
        first_total=float(s["first_total"]),
        rng_sampling=restore_generator(ckpt.rng["sampling"]),
        rng_structure=restore_generator(ckpt.rng["structure"]),
        rng_noise=restore_generator(ckpt.rng["noise"]),
    )
