"""Command-line entry points: prepare, train, evaluate, ablate, grad-check.

One workspace directory (--out) holds everything a run produces:
manifest/ from prepare, checkpoints/ and logs/metrics.jsonl from train,
reports/*.csv|json from evaluate and ablate. Existing outputs are never
overwritten without --force.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .encoder import EmbeddingTable, forward
from .engine import (MODES, TrainConfig, load_checkpoint, state_from_checkpoint,
                     train)
from .fdcheck import REL_TOL, run_suite
from .metrics import (bucket_reports, evaluate_full_ranking, report_rows,
                      write_csv)

# ablation tokens for the adversary on/off variants of the full mode
_ABLATION_TOKENS = {
    "wo_sp": ("avogcl", {"structure_perturb": False}),
    "wo_ep": ("avogcl", {"embed_perturb": False}),
    "wo_both": ("avogcl", {"structure_perturb": False, "embed_perturb": False}),
}


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(2)


def _check_collision(path: Path, force: bool, what: str) -> None:
    if path.exists() and not force:
        _fail(f"{what} already exists at {path}; pass --force to overwrite")


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios must be three comma-separated numbers")
    return tuple(parts)  # type: ignore[return-value]


def _parse_topk(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def cmd_prepare(args) -> int:
    out = Path(args.out)
    manifest = out / "manifest"
    _check_collision(manifest / "stats.json", args.force, "manifest")
    try:
        records, skipped = data_mod.ingest(args.input, strict=args.strict)
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    filtered = data_mod.kcore_filter(records, args.min_interactions,
                                     args.rating_threshold)
    if not filtered:
        _fail(f"no interactions survive filtering "
              f"(ingested {len(records)}, malformed {skipped})")
    split = data_mod.split(filtered, args.ratios, args.seed)
    data_mod.write_split(split, manifest)
    stats = split.stats()
    stats["min_interactions"] = args.min_interactions
    stats["rating_threshold"] = args.rating_threshold
    stats["malformed_lines"] = skipped
    with open(manifest / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"prepared {manifest}")
    print(f"  min_interactions: {args.min_interactions}")
    print(f"  users: {stats['num_users']}  items: {stats['num_items']}  "
          f"interactions: {stats['num_interactions']}")
    print(f"  train/val/test: {stats['num_train']}/{stats['num_val']}/{stats['num_test']}")
    print(f"  sparsity: {100.0 * stats['sparsity']:.2f}%")
    if skipped:
        print(f"  malformed lines skipped: {skipped}")
    return 0


def _load_config(args) -> TrainConfig:
    try:
        config = TrainConfig.from_file(args.config)
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
        config.validate()
    return config


def cmd_train(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    manifest = Path(args.data) if args.data else out / "manifest"
    if not (manifest / "stats.json").exists():
        _fail(f"no prepared manifest at {manifest}; run `avogcl prepare` first")
    split = data_mod.load_split(manifest)
    metrics_path = out / "logs" / "metrics.jsonl"
    if args.resume is None:
        _check_collision(metrics_path, args.force, "training log")
        state = None
    else:
        try:
            ckpt = load_checkpoint(args.resume)
            state = state_from_checkpoint(ckpt, config, split)
        except (OSError, ValueError) as exc:
            _fail(f"cannot resume: {exc}")
    result = train(config, split, out_dir=out, state=state)
    last = result.reports[-1] if result.reports else None
    print(f"trained mode={config.mode} seed={config.seed} "
          f"epochs={result.state.epoch}")
    if last is not None:
        print(f"  final total loss: {last.losses.total:.6f}")
    if result.best_epoch:
        print(f"  best val recall@20: {result.best_value:.6f} at epoch {result.best_epoch}")
    if result.aborted:
        print("  run aborted on divergence; last good state checkpointed",
              file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    split_dir = Path(args.split)
    split = data_mod.load_split(split_dir)
    if (ckpt.num_users, ckpt.num_items) != (split.num_users, split.num_items):
        _fail(f"checkpoint graph {ckpt.num_users}x{ckpt.num_items} does not match "
              f"split {split.num_users}x{split.num_items}")
    table = EmbeddingTable(user_emb=ckpt.arrays["user_emb"],
                           item_emb=ckpt.arrays["item_emb"])
    trace = forward(split.train_graph(), table, ckpt.L)
    report = evaluate_full_ranking(trace, split, args.phase, args.topk)
    if args.buckets:
        report.buckets = bucket_reports(trace, split, args.phase, args.topk,
                                        side=args.buckets)
    dataset = split_dir.resolve().parent.name or split_dir.name
    out = Path(args.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{ckpt.mode}_{args.phase}"
    json_path = out / f"{stem}.json"
    csv_path = out / f"{stem}.csv"
    _check_collision(json_path, args.force, "evaluation report")
    _check_collision(csv_path, args.force, "evaluation report")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_csv(csv_path, report_rows(report, ckpt.mode, dataset, args.seed))
    for n in report.topk:
        print(f"{args.phase} recall@{n}: {report.recall[n]:.6f}  "
              f"ndcg@{n}: {report.ndcg[n]:.6f}")
    print(f"wrote {json_path} and {csv_path}")
    return 0


def _parse_grid(specs: list[str]) -> list[dict]:
    """--grid key=v1,v2 flags -> list of override dicts (cartesian product)."""
    combos: list[dict] = [{}]
    for spec in specs or []:
        if "=" not in spec:
            _fail(f"grid spec must be key=v1,v2,..., got {spec!r}")
        key, values = spec.split("=", 1)
        key = key.strip()
        expanded = []
        for value in values.split(","):
            for combo in combos:
                entry = dict(combo)
                entry[key] = value.strip()
                expanded.append(entry)
        combos = expanded
    return combos


def _mode_token(token: str) -> tuple[str, dict]:
    if token in _ABLATION_TOKENS:
        mode, flags = _ABLATION_TOKENS[token]
        return mode, dict(flags)
    if token in MODES:
        return token, {}
    _fail(f"unknown mode token {token!r}; valid: {', '.join(MODES)}, "
          f"{', '.join(_ABLATION_TOKENS)}")


def cmd_ablate(args) -> int:
    base = _load_config(args)
    out = Path(args.out)
    reports_dir = out / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    csv_path = reports_dir / "ablation.csv"
    _check_collision(csv_path, args.force, "ablation report")
    manifest = Path(args.data) if args.data else out / "manifest"
    split = data_mod.load_split(manifest)
    dataset = manifest.resolve().parent.name or manifest.name
    tokens = [t.strip() for t in args.modes.split(",") if t.strip()]
    combos = _parse_grid(args.grid)
    rows: list[dict] = []
    for token in tokens:
        mode, flag_overrides = _mode_token(token)
        for combo in combos:
            overrides = dict(base.to_dict())
            overrides["mode"] = mode
            overrides.update(flag_overrides)
            overrides.update(combo)
            config = TrainConfig.from_mapping(overrides)
            label = token if not combo else \
                token + "[" + ",".join(f"{k}={v}" for k, v in sorted(combo.items())) + "]"
            print(f"ablate: running {label} ...", flush=True)
            result = train(config, split)
            trace = forward(split.train_graph(), result.table, config.L)
            report = evaluate_full_ranking(trace, split, "test", config.topk_list)
            rows.extend(report_rows(report, label, dataset, config.seed))
    write_csv(csv_path, rows)
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def cmd_grad_check(args) -> int:
    per_mode = max(1, -(-args.size // len(MODES)))  # ceil division
    results = run_suite(instances_per_mode=per_mode, seed=args.seed)
    worst: dict[str, float] = {}
    for _, errors in results:
        for tensor, err in errors.items():
            worst[tensor] = max(worst.get(tensor, 0.0), err)
    failed = False
    for tensor in sorted(worst):
        err = worst[tensor]
        status = "PASS" if err <= REL_TOL else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{status} {tensor} rel_err {err:.3e} (tolerance {REL_TOL:.0e})")
    print(f"checked {len(results)} instances")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avogcl",
        description="Adversarial-view graph contrastive learning for recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter and split an interaction log")
    p.add_argument("--input", required=True, help="TSV interaction log")
    p.add_argument("--min-interactions", type=int, default=15)
    p.add_argument("--rating-threshold", type=float, default=None)
    p.add_argument("--ratios", type=_parse_ratios, default=(8.0, 1.0, 1.0))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="workspace directory")
    p.add_argument("--strict", action="store_true",
                   help="treat malformed lines as fatal")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True, help="workspace directory")
    p.add_argument("--data", default=None,
                   help="manifest directory (default: <out>/manifest)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="full-ranking evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="manifest directory")
    p.add_argument("--topk", type=_parse_topk, default=(10, 20))
    p.add_argument("--phase", choices=("val", "test"), default="test")
    p.add_argument("--buckets", choices=("user", "item"), default=None,
                   help="add sparsity-bucket breakdowns")
    p.add_argument("--seed", type=int, default=0, help="seed label for CSV rows")
    p.add_argument("--out", required=True, help="workspace directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare a matrix of modes")
    p.add_argument("--config", required=True)
    p.add_argument("--modes", required=True,
                   help="comma-separated mode tokens (incl. wo_sp/wo_ep/wo_both)")
    p.add_argument("--grid", action="append", default=[],
                   help="key=v1,v2,... sweep; repeatable (cartesian product)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient self-check")
    p.add_argument("--size", type=int, default=16,
                   help="total instance budget across modes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    return parser


class _OncePerMessage(logging.Filter):
    """Let each distinct warning template through a single time.

    Degenerate-row warnings can legitimately fire every epoch at scale;
    one line per kind is enough for a terminal session.
    """

    def __init__(self):
        super().__init__()
        self._seen = set()

    def filter(self, record):
        key = (record.name, record.msg)
        if key in self._seen:
            return False
        self._seen.add(key)
        return True


def _setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler.addFilter(_OncePerMessage())
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.WARNING)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
