"""Command-line entry point: generate / train / eval / cluster.

Options come from a flat ``key = value`` config file plus flag overrides
(flags > file > defaults). Each training or evaluation run writes its
artifacts into a directory named by the config digest and seed, together
with a manifest listing every output. Exit codes: 0 success, 2 bad
usage/config, 3 numerical abort, 4 checkpoint/dataset incompatibility,
5 I/O or parse failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import (ClusterParams, RelaxationSchedule, calibrate, dbscan, relax)
from .data import (Dataset, GeneratorConfig, generate_dataset, load_dataset,
                   mask_modality, save_dataset, split_query_target)
from .errors import (CheckpointMismatchError, ConfigError, DataFormatError,
                     NumericalError)
from .evaluation import (UNLABELED_PREDICTION, evaluate_features, export_embeddings,
                         format_sig, ncd_accuracy, pr_curve, write_metrics_summary,
                         write_pr_curve)
from .training import (TrainConfig, Trainer, config_digest, load_checkpoint,
                       model_features, resume_trainer, save_checkpoint)

OUT_DIR_ENV = "MMNCD_OUT"


def parse_config_file(path) -> dict[str, str]:
    """Read a flat key = value document; '#' starts a comment."""
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read config file {path}: {exc}") from exc
    for i, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {i}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _merge_config(file_values: dict[str, str], overrides: dict[str, object],
                  allowed: set[str], what: str) -> dict[str, str]:
    merged = {}
    for key, value in file_values.items():
        if key not in allowed:
            raise ConfigError(f"unknown {what} config field {key!r}")
        merged[key] = value
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, bool):
            merged[key] = "true" if value else "false"
        elif isinstance(value, float):
            merged[key] = repr(value)
        else:
            merged[key] = str(value)
    return merged


def _write_manifest(path: Path, digest: str, seed: int, outputs: dict[str, str],
                    timings: dict[str, float]) -> None:
    payload = {
        "tool_version": __version__,
        "config_digest": digest,
        "seed": seed,
        "outputs": outputs,
        "timings_seconds": {k: round(v, 3) for k, v in timings.items()},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_base(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUT_DIR_ENV, "runs"))


# ----------------------------------------------------------------- generate


_GENERATOR_FIELDS = {f.name for f in fields(GeneratorConfig)}


def _generator_config(args) -> GeneratorConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "labeled_classes": args.labeled_classes,
        "novel_classes": args.novel_classes,
        "samples_per_class": args.samples_per_class,
        "latent_dim": args.latent_dim,
        "modality_dims": args.modality_dims,
        "class_separation": args.separation,
        "within_noise": args.within_noise,
        "seed": args.seed,
    }
    merged = _merge_config(file_values, overrides, _GENERATOR_FIELDS, "generator")
    if "labeled_classes" not in merged or "novel_classes" not in merged \
            or "samples_per_class" not in merged:
        raise ConfigError("generator config requires labeled_classes, novel_classes, "
                          "and samples_per_class")
    kwargs: dict[str, object] = {}
    for key, raw in merged.items():
        if key == "modality_dims":
            kwargs[key] = tuple(int(d) for d in str(raw).split(","))
        elif key in ("class_separation", "within_noise"):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = int(raw)
    return GeneratorConfig(**kwargs)


def cmd_generate(args) -> int:
    started = time.monotonic()
    config = _generator_config(args)
    ds = generate_dataset(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    digest = config_digest(TrainConfig(seed=config.seed), config.modality_dims,
                           config.labeled_classes + config.novel_classes)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), digest, config.seed,
                    {"dataset": str(out)}, {"generate": time.monotonic() - started})
    print(f"wrote {len(ds.samples)} samples to {out}")
    return 0


# -------------------------------------------------------------------- train


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def _train_config(args) -> TrainConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "pretrain_epochs": args.pretrain_epochs,
        "train_epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "weight_decay": args.weight_decay,
        "eps_min": args.eps_min,
        "feature_dim": args.feature_dim,
        "attention_heads": args.heads,
        "eps_growth": args.eps_growth,
        "min_pts_step": args.min_pts_step,
        "min_pts_floor": args.min_pts_floor,
        "cluster_metric": args.cluster_metric,
        "clustering_warmup_epochs": args.clustering_warmup,
        "max_fresh_per_epoch": args.max_fresh_per_epoch,
        "queries_per_class": args.queries_per_class,
        "seed": args.seed,
    }
    if args.no_ce:
        overrides["use_ce"] = False
    if args.no_td:
        overrides["use_td"] = False
    if args.no_ss:
        overrides["use_ss"] = False
    if args.no_clustering:
        overrides["use_clustering"] = False
    merged = _merge_config(file_values, overrides, _TRAIN_FIELDS, "training")
    defaults = TrainConfig().to_dict()
    defaults.update(merged)
    return TrainConfig.from_dict(defaults)


def cmd_train(args) -> int:
    started = time.monotonic()
    dataset = load_dataset(args.dataset)
    config = _train_config(args)
    config.validate()

    dims = tuple(spec.dim for spec in dataset.specs)
    digest = config_digest(config, dims, dataset.num_classes)
    run_dir = _out_base(args.out) / f"{digest[:12]}-seed{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        trainer = resume_trainer(dataset, load_checkpoint(args.resume))
        if trainer.config != config:
            raise CheckpointMismatchError("resume checkpoint was written with a "
                                          "different training config")
        trainer.train()
    else:
        trainer = Trainer(dataset, config)
        trainer.run()

    outputs = {
        "checkpoint": str(run_dir / "checkpoint.ckpt"),
        "epoch_metrics": str(run_dir / "metrics_epoch.csv"),
        "iteration_log": str(run_dir / "metrics_iteration.csv"),
        "clustering_log": str(run_dir / "clustering.csv"),
        "config": str(run_dir / "config.txt"),
    }
    save_checkpoint(trainer, outputs["checkpoint"])
    trainer.write_logs(outputs["iteration_log"], outputs["epoch_metrics"],
                       outputs["clustering_log"])
    config_text = "\n".join(f"{k} = {v}" for k, v in sorted(config.to_dict().items()))
    (run_dir / "config.txt").write_text(config_text + "\n", encoding="utf-8")
    _write_manifest(run_dir / "manifest.json", digest, config.seed, outputs,
                    {"train": time.monotonic() - started})
    if trainer.epoch_log:
        final = trainer.epoch_log[-1]
        print(f"run {run_dir.name}: epoch {final.epoch} "
              f"ncd_accuracy={format_sig(final.ncd_accuracy)} map={format_sig(final.retrieval_map)}")
    else:
        print(f"run {run_dir.name}: no training epochs executed")
    return 0


# --------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    started = time.monotonic()
    dataset = load_dataset(args.dataset)
    if args.drop_modality is not None:
        dataset = mask_modality(dataset, args.drop_modality)
    checkpoint = load_checkpoint(args.checkpoint)
    trainer = resume_trainer(dataset, checkpoint)
    queries_per_class = args.queries_per_class or checkpoint.config.queries_per_class
    split_seed = checkpoint.config.seed if args.seed is None else args.seed

    novel = dataset.unlabeled_samples()
    if not novel:
        raise ConfigError("dataset has no unlabeled samples to evaluate")
    novel_ids = [s.sample_id for s in novel]
    features = model_features(trainer.model, novel)
    by_id = {sid: i for i, sid in enumerate(novel_ids)}

    novel_ds = Dataset(dataset.specs, novel, dataset.labeled_classes, dataset.novel_classes,
                       dataset.seed, {sid: dataset.hidden_classes[sid] for sid in novel_ids})
    query_ids, target_ids = split_query_target(novel_ds, queries_per_class, seed=split_seed)
    metrics, run = evaluate_features(
        features[[by_id[i] for i in query_ids]],
        [dataset.hidden_classes[i] for i in query_ids],
        features[[by_id[i] for i in target_ids]],
        [dataset.hidden_classes[i] for i in target_ids],
        query_ids, target_ids)

    predicted = np.array([trainer.store.get(sid) if trainer.store.get(sid) is not None
                          else UNLABELED_PREDICTION for sid in novel_ids])
    truth = np.array([dataset.hidden_classes[sid] for sid in novel_ids])
    metrics["ncd_accuracy"] = ncd_accuracy(predicted, truth)

    digest = config_digest(checkpoint.config, checkpoint.modality_dims, checkpoint.num_classes)
    run_dir = _out_base(args.out) / f"eval-{digest[:12]}-seed{split_seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "metrics": str(run_dir / "metrics.csv"),
        "pr_curve": str(run_dir / "pr_curve.csv"),
        "embeddings": str(run_dir / "embeddings.csv"),
    }
    write_metrics_summary(outputs["metrics"], {
        "map": metrics["map"], "nn": metrics["nn"], "ndcg": metrics["ndcg"],
        "anmrr": metrics["anmrr"], "ncd_accuracy": metrics["ncd_accuracy"],
    })
    recalls, precisions = pr_curve(run)
    write_pr_curve(outputs["pr_curve"], recalls, precisions)
    export_embeddings(features, truth, outputs["embeddings"], ids=novel_ids)
    _write_manifest(run_dir / "manifest.json", digest, split_seed, outputs,
                    {"eval": time.monotonic() - started})
    print(f"eval {run_dir.name}: " + " ".join(f"{k}={format_sig(v)}"
                                              for k, v in sorted(metrics.items())))
    return 0


# ------------------------------------------------------------------ cluster


def _read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read embeddings file {path}: {exc}") from exc
    if not lines or not lines[0].startswith("id,label"):
        raise DataFormatError(f"{path}: expected header 'id,label,f0,...'")
    ids, labels, rows = [], [], []
    width = None
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            ids.append(int(parts[0]))
            labels.append(int(parts[1]) if parts[1] not in ("", "none") else -1)
            vec = [float(x) for x in parts[2:]]
        except (IndexError, ValueError) as exc:
            raise DataFormatError(f"{path}: line {i}: malformed row") from exc
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise DataFormatError(f"{path}: line {i}: expected {width} features, got {len(vec)}")
        rows.append(vec)
    if not rows:
        raise DataFormatError(f"{path}: no embedding rows")
    return np.array(ids), np.array(labels), np.array(rows, dtype=np.float64)


def cmd_cluster(args) -> int:
    started = time.monotonic()
    ids, labels, points = _read_embeddings(args.embeddings)

    if args.eps is not None and args.min_pts is not None:
        base = ClusterParams(args.eps, args.min_pts)
    else:
        labeled_mask = labels >= 0
        if not labeled_mask.any():
            raise ConfigError("no labels in the embeddings file; pass --eps and --min-pts")
        base = calibrate(points[labeled_mask], labels[labeled_mask])

    schedule = RelaxationSchedule(args.eps_growth, args.min_pts_step, args.min_pts_floor)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    snapshots = []
    stats_lines = ["epoch,eps,min_pts,clusters,noise"]
    for epoch in range(args.epochs):
        params = relax(base, schedule, epoch)
        assignment = dbscan(points, params)
        snapshots.append(assignment)
        clusters = int(assignment.max()) + 1 if assignment.size and assignment.max() >= 0 else 0
        noise = int(np.count_nonzero(assignment == -1))
        stats_lines.append(f"{epoch},{format_sig(params.eps)},{params.min_pts},"
                           f"{clusters},{noise}")

    assignment_lines = ["id," + ",".join(f"epoch_{e}" for e in range(args.epochs))]
    for i, sid in enumerate(ids):
        assignment_lines.append(f"{sid}," + ",".join(str(int(s[i])) for s in snapshots))
    outputs = {
        "assignments": str(out_dir / "assignments.csv"),
        "stats": str(out_dir / "cluster_stats.csv"),
    }
    Path(outputs["assignments"]).write_text("\n".join(assignment_lines) + "\n", encoding="utf-8")
    Path(outputs["stats"]).write_text("\n".join(stats_lines) + "\n", encoding="utf-8")
    _write_manifest(out_dir / "manifest.json", f"cluster-{base.eps!r}-{base.min_pts}", 0,
                    outputs, {"cluster": time.monotonic() - started})
    print(f"clustered {len(ids)} points over {args.epochs} epoch(s) into {out_dir}")
    return 0


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmncd",
        description="Multi-modal novel-class discovery: synthetic data, fusion "
                    "training with density pseudo-labeling, and open-set retrieval "
                    "evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic multi-modal dataset")
    gen.add_argument("--out", required=True, help="output dataset path")
    gen.add_argument("--config", help="config file with generator fields")
    gen.add_argument("--labeled-classes", type=int, help="number of ground-truth classes")
    gen.add_argument("--novel-classes", type=int, help="number of unlabeled novel classes")
    gen.add_argument("--samples-per-class", type=int, help="samples drawn per class")
    gen.add_argument("--latent-dim", type=int, help="shared latent dimension (default 16)")
    gen.add_argument("--modality-dims", help="comma-separated per-modality dims (default 16,16,16,16)")
    gen.add_argument("--separation", type=float, help="class separation scale (default 10)")
    gen.add_argument("--within-noise", type=float, help="within-class noise scale (default 1)")
    gen.add_argument("--seed", type=int, help="root seed (default 0)")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="pretrain and train on a dataset")
    tr.add_argument("--dataset", required=True, help="dataset file from 'generate'")
    tr.add_argument("--config", help="config file with training fields")
    tr.add_argument("--out", help=f"output base dir (default ${OUT_DIR_ENV} or ./runs)")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--pretrain-epochs", type=int, help="supervised warm-up epochs (default 10)")
    tr.add_argument("--epochs", type=int, help="training epochs (default 40)")
    tr.add_argument("--batch-size", type=int, help="minibatch size (default 8)")
    tr.add_argument("--lr", type=float, help="initial learning rate (default 0.001)")
    tr.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 0.0001)")
    tr.add_argument("--eps-min", type=float, help="exploration floor (default 0.1)")
    tr.add_argument("--no-ce", action="store_true", help="disable the cross-entropy loss")
    tr.add_argument("--no-td", action="store_true", help="disable the reward-regression loss")
    tr.add_argument("--no-ss", action="store_true", help="disable the contrastive loss")
    tr.add_argument("--no-clustering", action="store_true", help="disable pseudo-labeling")
    tr.add_argument("--feature-dim", type=int, help="fused feature width (default 64)")
    tr.add_argument("--heads", type=int, help="attention heads (default 4)")
    tr.add_argument("--eps-growth", type=float, help="radius growth per epoch (default 1.05)")
    tr.add_argument("--min-pts-step", type=int, help="density decrement per epoch (default 1)")
    tr.add_argument("--min-pts-floor", type=int, help="density threshold floor (default 2)")
    tr.add_argument("--cluster-metric", choices=("cosine", "euclidean"),
                    help="clustering space for stored actions (default cosine)")
    tr.add_argument("--clustering-warmup", type=int,
                    help="training epochs before the first labeling pass (default 3)")
    tr.add_argument("--max-fresh-per-epoch", type=int,
                    help="new class ids per labeling pass, 0 = unlimited (default 1)")
    tr.add_argument("--queries-per-class", type=int, help="retrieval queries per class (default 30)")
    tr.add_argument("--seed", type=int, help="root seed (default 0)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", help=f"output base dir (default ${OUT_DIR_ENV} or ./runs)")
    ev.add_argument("--queries-per-class", type=int, help="override the checkpoint's query count")
    ev.add_argument("--drop-modality", type=int, help="mark this modality missing everywhere")
    ev.add_argument("--seed", type=int, help="query/target split seed (default: checkpoint seed)")
    ev.set_defaults(func=cmd_eval)

    cl = sub.add_parser("cluster", help="run density clustering on an embeddings CSV")
    cl.add_argument("--embeddings", required=True, help="CSV with header id,label,f0,...")
    cl.add_argument("--out", required=True, help="output directory")
    cl.add_argument("--eps", type=float, help="radius (omit to calibrate from labels)")
    cl.add_argument("--min-pts", type=int, help="density threshold (omit to calibrate)")
    cl.add_argument("--epochs", type=int, default=1, help="number of relaxation snapshots")
    cl.add_argument("--eps-growth", type=float, default=1.05)
    cl.add_argument("--min-pts-step", type=int, default=1)
    cl.add_argument("--min-pts-floor", type=int, default=2)
    cl.set_defaults(func=cmd_cluster)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except CheckpointMismatchError as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return 4
    except (DataFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
