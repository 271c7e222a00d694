"""Training loop: supervised warm-up, reward-driven training with per-epoch
pseudo-labeling, Adam updates with linear learning-rate decay, checkpoints.

A run is fully determined by (dataset, config): batching, initialization,
and exploration draw from named substreams of the one seed, keyed by epoch
or iteration counters, so checkpoint resume replays the exact trajectory.

The loop reads only each sample's label state (ground truth or a frozen
generated label); the hidden true classes of novel samples are touched
exclusively by the metric evaluation at epoch boundaries.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .clustering import (ActionMemory, ClusterParams, EpochClusterStats,
                         PseudoLabelStore, RelaxationSchedule, assign_pseudo_labels,
                         calibrate, relax)
from .data import GROUND_TRUTH, Dataset, batch_iterator, num_batches, split_query_target
from .errors import (CheckpointMismatchError, ConfigError, DataFormatError,
                     NumericalError)
from .evaluation import UNLABELED_PREDICTION, evaluate_features, ncd_accuracy
from .model import FusionNetwork
from .seeding import substream

logger = logging.getLogger(__name__)

_CKPT_MAGIC = "#mmncd-checkpoint v1"


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 10
    train_epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    eps_min: float = 0.1
    use_ce: bool = True
    use_td: bool = True
    use_ss: bool = True
    use_clustering: bool = True
    feature_dim: int = 64
    attention_heads: int = 4
    eps_growth: float = 1.05
    min_pts_step: int = 1
    min_pts_floor: int = 2
    cluster_metric: str = "cosine"  # "cosine" (unit-normalized actions) or "euclidean"
    # epochs of reward/contrastive training before the first labeling pass;
    # features drift too fast right after the warm-up/training transition for
    # the stored actions of one epoch to form dependable clusters
    clustering_warmup_epochs: int = 3
    # new ids granted per labeling pass (0 = unlimited); one id per epoch keeps
    # transient same-class fragments from exhausting the class-id budget
    max_fresh_per_epoch: int = 1
    queries_per_class: int = 30
    seed: int = 0

    def validate(self) -> None:
        if self.pretrain_epochs < 0 or self.train_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")
        if not 0.0 <= self.eps_min <= 1.0:
            raise ConfigError("eps_min must be in [0, 1]")
        if self.feature_dim < 1 or self.attention_heads < 1:
            raise ConfigError("feature_dim and attention_heads must be >= 1")
        if self.feature_dim % self.attention_heads != 0:
            raise ConfigError("attention_heads must divide feature_dim")
        if self.cluster_metric not in ("cosine", "euclidean"):
            raise ConfigError(f"cluster_metric must be cosine or euclidean, "
                              f"got {self.cluster_metric!r}")
        if self.clustering_warmup_epochs < 0:
            raise ConfigError("clustering_warmup_epochs must be >= 0")
        if self.max_fresh_per_epoch < 0:
            raise ConfigError("max_fresh_per_epoch must be >= 0 (0 = unlimited)")
        if self.queries_per_class < 1:
            raise ConfigError("queries_per_class must be >= 1")

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            elif isinstance(value, float):
                out[f.name] = repr(value)
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown training config field {key!r}")
            kind = known[key]
            if kind == "bool":
                if value not in ("true", "false"):
                    raise ConfigError(f"field {key!r} must be true/false, got {value!r}")
                kwargs[key] = value == "true"
            elif kind == "float":
                kwargs[key] = float(value)
            elif kind == "str":
                kwargs[key] = value
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


class AdamOptimizer:
    """Adam with bias correction and decoupled weight decay.

    The learning rate decays linearly in the optimizer step index over the
    planned total, floored at one percent of the initial rate.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params, learning_rate: float, weight_decay: float, total_iters: int):
        self.params = list(params)
        self.lr0 = learning_rate
        self.weight_decay = weight_decay
        self.total_iters = max(total_iters, 1)
        self.iteration = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def learning_rate(self, iteration: int | None = None) -> float:
        it = self.iteration if iteration is None else iteration
        return self.lr0 * max(1.0 - it / self.total_iters, 0.01)

    def step(self) -> float:
        lr = self.learning_rate()
        t = self.iteration + 1
        correct1 = 1.0 - self.BETA1 ** t
        correct2 = 1.0 - self.BETA2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            update = (m / correct1) / (np.sqrt(v / correct2) + self.EPS)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update
        self.iteration += 1
        return lr


@dataclass
class IterationRecord:
    iteration: int
    phase: str  # "pretrain" or "train"
    epsilon: float
    lr: float
    td: float
    ce: float
    ss: float
    total: float
    reward_mean: float


@dataclass
class EpochRecord:
    epoch: int
    td: float
    ce: float
    ss: float
    total: float
    epsilon: float
    lr: float
    coverage: float
    ncd_accuracy: float
    retrieval_map: float


@dataclass
class ClusterRecord:
    epoch: int
    eps: float
    min_pts: int
    clusters: int
    new_labels: int
    noise: int
    skipped: int
    coverage: float


def model_features(model: FusionNetwork, samples, chunk: int = 1024) -> np.ndarray:
    """Fused feature matrix for a sample list, computed without graph building."""
    rows = []
    for start in range(0, len(samples), chunk):
        rows.append(model.infer_actions(samples[start:start + chunk]))
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, model.feature_dim))


class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig, model: FusionNetwork | None = None):
        config.validate()
        self.dataset = dataset
        self.config = config
        dims = tuple(spec.dim for spec in dataset.specs)
        self.model = model or FusionNetwork(dims, dataset.num_classes,
                                            config.feature_dim, config.attention_heads,
                                            seed=config.seed)
        self.params = self.model.parameters()

        self.labeled = dataset.labeled_samples()
        self.unlabeled = dataset.unlabeled_samples()
        self.ground_truth_ids = {s.sample_id for s in self.labeled}

        pretrain_iters = config.pretrain_epochs * num_batches(len(self.labeled), config.batch_size) \
            if self.labeled else 0
        self.total_train_iters = max(config.train_epochs * num_batches(len(dataset.samples),
                                                                       config.batch_size), 1)
        self.optimizer = AdamOptimizer(self.params, config.learning_rate, config.weight_decay,
                                       pretrain_iters + self.total_train_iters)

        self.memory = ActionMemory()
        self.store = PseudoLabelStore(first_fresh_id=dataset.labeled_classes)
        self.schedule = RelaxationSchedule(config.eps_growth, config.min_pts_step,
                                           config.min_pts_floor)
        self.base_cluster_params: ClusterParams | None = None

        self.epoch = 0        # completed training epochs
        self.train_step = 0   # completed training iterations
        self.pretrained = False
        self.iteration_log: list[IterationRecord] = []
        self.epoch_log: list[EpochRecord] = []
        self.cluster_log: list[ClusterRecord] = []

        self._eval_split: tuple[list[int], list[int]] | None = None

    # ------------------------------------------------------------------ loop

    def _cluster_space(self, vectors: np.ndarray) -> np.ndarray:
        """Map feature vectors into the configured clustering space."""
        if self.config.cluster_metric == "euclidean":
            return vectors
        norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
        if np.any(norms < 1e-12):
            raise NumericalError("cannot unit-normalize a zero action vector for clustering")
        return vectors / norms

    def _batch_losses(self, samples, eps: float, rng) -> tuple[L.LossBreakdown, float]:
        cfg = self.config
        result = self.model.forward(samples)

        if self.pretrained and cfg.train_epochs > 0 and self.epoch < cfg.train_epochs:
            stored = self._cluster_space(result.action.data)
            for s, action in zip(samples, stored):
                self.memory.store(s.sample_id, action)

        references = [s.label if s.label_kind == GROUND_TRUTH else self.store.get(s.sample_id)
                      for s in samples]
        rows = [i for i, ref in enumerate(references) if ref is not None]
        rewards = [L.reward(L.select_class(result.probs.data[i], eps, rng), references[i])
                   for i in rows]

        td = None
        if cfg.use_td and rows:
            td = L.td_loss(T.take_rows(result.value, rows), rewards)
        ce = L.ce_loss(result.probs, references) if cfg.use_ce else None
        ss = L.contrastive_loss(result.view_a, result.view_b) if cfg.use_ss else None
        breakdown = L.total_loss(td, ce, ss)

        for name, term in (("td", breakdown.td), ("ce", breakdown.ce), ("ss", breakdown.ss)):
            if not math.isfinite(term.item()):
                raise NumericalError(f"non-finite {name} loss at step {self.train_step}")
        reward_mean = float(np.mean(rewards)) if rewards else 0.0
        return breakdown, reward_mean

    def _apply(self, breakdown: L.LossBreakdown) -> float:
        T.zero_gradients(self.params)
        T.backward(breakdown.total)
        return self.optimizer.step()

    def pretrain(self) -> None:
        """Supervised warm-up on the labeled subset only; greedy class choice."""
        cfg = self.config
        if cfg.pretrain_epochs > 0 and not self.labeled:
            raise ConfigError("pretraining requires a non-empty labeled set")
        rng = substream(cfg.seed, "pretrain-explore")  # never drawn at eps=0
        for e in range(cfg.pretrain_epochs):
            for batch in batch_iterator(self.labeled, cfg.batch_size, cfg.seed, epoch=e):
                breakdown, reward_mean = self._batch_losses(batch, eps=0.0, rng=rng)
                lr = self._apply(breakdown)
                values = breakdown.as_floats()
                self.iteration_log.append(IterationRecord(
                    self.optimizer.iteration - 1, "pretrain", 0.0, lr,
                    values["td"], values["ce"], values["ss"], values["total"], reward_mean))
        self.pretrained = True

    def calibrate_clustering(self) -> None:
        """Fit base DBSCAN hyperparameters on labeled features vs ground truth."""
        if not self.config.use_clustering:
            return
        if not self.labeled:
            raise ConfigError("clustering calibration requires labeled samples")
        features = self._cluster_space(model_features(self.model, self.labeled))
        labels = np.array([s.label for s in self.labeled])
        self.base_cluster_params = calibrate(features, labels)
        logger.info("calibrated clustering: eps=%.6g min_pts=%d",
                    self.base_cluster_params.eps, self.base_cluster_params.min_pts)

    def train(self, stop_after: int | None = None) -> None:
        """Run training epochs (all remaining, or up to stop_after completed)."""
        cfg = self.config
        if not self.pretrained:
            raise ConfigError("call pretrain() (or resume a checkpoint) before train()")
        if cfg.use_clustering and self.base_cluster_params is None and cfg.train_epochs > 0:
            raise ConfigError("clustering enabled but not calibrated")
        last = cfg.train_epochs if stop_after is None else min(stop_after, cfg.train_epochs)
        while self.epoch < last:
            self._train_one_epoch()

    def _train_one_epoch(self) -> None:
        cfg = self.config
        epoch_index = self.epoch
        epoch_values = []
        last_eps = L.epsilon(max(self.train_step - 1, 0), self.total_train_iters, cfg.eps_min)
        last_lr = self.optimizer.learning_rate()
        for batch in batch_iterator(self.dataset, cfg.batch_size, cfg.seed,
                                    epoch=cfg.pretrain_epochs + epoch_index):
            eps = L.epsilon(self.train_step, self.total_train_iters, cfg.eps_min)
            rng = substream(cfg.seed, f"explore:{self.train_step}")
            breakdown, reward_mean = self._batch_losses(batch, eps, rng)
            lr = self._apply(breakdown)
            values = breakdown.as_floats()
            self.iteration_log.append(IterationRecord(
                self.optimizer.iteration - 1, "train", eps, lr,
                values["td"], values["ce"], values["ss"], values["total"], reward_mean))
            epoch_values.append(values)
            self.train_step += 1
            last_eps, last_lr = eps, lr

        if cfg.use_clustering and epoch_index >= cfg.clustering_warmup_epochs:
            # the strict-to-loose clock starts at the first labeling epoch
            params = relax(self.base_cluster_params, self.schedule,
                           epoch_index - cfg.clustering_warmup_epochs)
            max_fresh = cfg.max_fresh_per_epoch if cfg.max_fresh_per_epoch > 0 else None
            stats = assign_pseudo_labels(self.memory, self.store, params,
                                         self.ground_truth_ids,
                                         max_class_id=self.dataset.num_classes - 1,
                                         max_fresh=max_fresh)
        else:
            self.memory.clear()
            stats = EpochClusterStats(0.0, 0, 0, 0, 0, 0)

        coverage = self.store.coverage(len(self.unlabeled))
        self.cluster_log.append(ClusterRecord(
            epoch_index + 1, stats.eps, stats.min_pts, stats.clusters_found,
            stats.new_labels, stats.noise_points, stats.skipped, coverage))
        logger.info("epoch %d clustering: eps=%.6g min_pts=%d clusters=%d new=%d coverage=%.4f",
                    epoch_index + 1, stats.eps, stats.min_pts, stats.clusters_found,
                    stats.new_labels, coverage)

        metrics = self.evaluate()
        means = {k: float(np.mean([v[k] for v in epoch_values])) if epoch_values else 0.0
                 for k in ("td", "ce", "ss", "total")}
        self.epoch_log.append(EpochRecord(
            epoch_index + 1, means["td"], means["ce"], means["ss"], means["total"],
            last_eps, last_lr, coverage, metrics["ncd_accuracy"], metrics["map"]))
        self.epoch += 1

    def run(self) -> list[EpochRecord]:
        self.pretrain()
        self.calibrate_clustering()
        self.train()
        return self.epoch_log

    # ------------------------------------------------------------ evaluation

    def _eval_ids(self) -> tuple[list[int], list[int]]:
        if self._eval_split is None:
            novel = Dataset(self.dataset.specs, self.unlabeled, self.dataset.labeled_classes,
                            self.dataset.novel_classes, self.dataset.seed,
                            {s.sample_id: self.dataset.hidden_classes[s.sample_id]
                             for s in self.unlabeled})
            self._eval_split = split_query_target(novel, self.config.queries_per_class,
                                                  seed=self.config.seed)
        return self._eval_split

    def evaluate(self) -> dict[str, float]:
        """Discovery accuracy plus retrieval metrics over the novel samples."""
        if not self.unlabeled:
            return {"ncd_accuracy": float("nan"), "map": float("nan"), "nn": float("nan"),
                    "ndcg": float("nan"), "anmrr": float("nan")}
        novel_ids = [s.sample_id for s in self.unlabeled]
        predicted = np.array([self.store.get(sid) if self.store.get(sid) is not None
                              else UNLABELED_PREDICTION for sid in novel_ids])
        truth = np.array([self.dataset.hidden_classes[sid] for sid in novel_ids])
        accuracy = ncd_accuracy(predicted, truth)

        features = model_features(self.model, self.unlabeled)
        by_id = {sid: i for i, sid in enumerate(novel_ids)}
        query_ids, target_ids = self._eval_ids()
        metrics, _ = evaluate_features(
            features[[by_id[i] for i in query_ids]],
            [self.dataset.hidden_classes[i] for i in query_ids],
            features[[by_id[i] for i in target_ids]],
            [self.dataset.hidden_classes[i] for i in target_ids],
            query_ids, target_ids)
        metrics["ncd_accuracy"] = accuracy
        return metrics

    # ----------------------------------------------------------------- logs

    def write_logs(self, iteration_path, epoch_path, cluster_path) -> None:
        write_iteration_log(iteration_path, self.iteration_log)
        write_epoch_log(epoch_path, self.epoch_log)
        write_cluster_log(cluster_path, self.cluster_log)


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def write_iteration_log(path, records: Sequence[IterationRecord]) -> None:
    lines = ["iteration,phase,epsilon,lr,td,ce,ss,total,reward_mean"]
    for r in records:
        lines.append(f"{r.iteration},{r.phase},{_fmt(r.epsilon)},{_fmt(r.lr)},"
                     f"{_fmt(r.td)},{_fmt(r.ce)},{_fmt(r.ss)},{_fmt(r.total)},{_fmt(r.reward_mean)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_epoch_log(path, records: Sequence[EpochRecord]) -> None:
    lines = ["epoch,td,ce,ss,total,epsilon,lr,coverage,ncd_accuracy,retrieval_map"]
    for r in records:
        lines.append(f"{r.epoch},{_fmt(r.td)},{_fmt(r.ce)},{_fmt(r.ss)},{_fmt(r.total)},"
                     f"{_fmt(r.epsilon)},{_fmt(r.lr)},{_fmt(r.coverage)},"
                     f"{_fmt(r.ncd_accuracy)},{_fmt(r.retrieval_map)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_cluster_log(path, records: Sequence[ClusterRecord]) -> None:
    lines = ["epoch,eps,min_pts,clusters,new_labels,noise,skipped,coverage"]
    for r in records:
        lines.append(f"{r.epoch},{_fmt(r.eps)},{r.min_pts},{r.clusters},{r.new_labels},"
                     f"{r.noise},{r.skipped},{_fmt(r.coverage)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------- checkpointing


def config_digest(config: TrainConfig, modality_dims: tuple[int, ...], num_classes: int) -> str:
    payload = dict(config.to_dict())
    payload["modality_dims"] = ",".join(str(d) for d in modality_dims)
    payload["num_classes"] = str(num_classes)
    text = "\n".join(f"{k}={payload[k]}" for k in sorted(payload))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class CheckpointData:
    config: TrainConfig
    modality_dims: tuple[int, ...]
    num_classes: int
    epoch: int
    train_step: int
    opt_iteration: int
    calibration: ClusterParams | None
    pseudo_labels: dict[int, int]
    pseudo_next: int
    param_names: list[str]
    param_values: list[np.ndarray]
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]


def save_checkpoint(trainer: Trainer, path) -> None:
    """Write a text header plus little-endian float64 payload; byte-stable."""
    cfg = trainer.config
    dims = tuple(spec.dim for spec in trainer.dataset.specs)
    digest = config_digest(cfg, dims, trainer.dataset.num_classes)

    header = [_CKPT_MAGIC, f"digest {digest}"]
    header.append(f"epoch {trainer.epoch}")
    header.append(f"train_step {trainer.train_step}")
    header.append(f"opt_iteration {trainer.optimizer.iteration}")
    if trainer.base_cluster_params is not None:
        header.append(f"calibration {trainer.base_cluster_params.eps!r} "
                      f"{trainer.base_cluster_params.min_pts}")
    else:
        header.append("calibration none")
    header.append(f"pseudo_next {trainer.store.next_fresh_id}")
    header.append(f"pseudo_count {len(trainer.store.labels)}")
    for sid in sorted(trainer.store.labels):
        header.append(f"pseudo {sid} {trainer.store.labels[sid]}")

    payload = dict(cfg.to_dict())
    payload["modality_dims"] = ",".join(str(d) for d in dims)
    payload["num_classes"] = str(trainer.dataset.num_classes)
    header.append(f"config_count {len(payload)}")
    for key in sorted(payload):
        header.append(f"config {key} {payload[key]}")

    header.append(f"param_count {len(trainer.params)}")
    total_floats = 0
    for p in trainer.params:
        shape = ",".join(str(d) for d in p.data.shape)
        header.append(f"param {p.name} {shape}")
        total_floats += p.data.size
    header.append(f"binary {3 * total_floats}")

    blobs = [p.data.astype("<f8").tobytes() for p in trainer.params]
    blobs += [m.astype("<f8").tobytes() for m in trainer.optimizer.m]
    blobs += [v.astype("<f8").tobytes() for v in trainer.optimizer.v]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = raw.find(b"\nbinary ")
    if not raw.startswith(_CKPT_MAGIC.encode()) or marker < 0:
        raise DataFormatError(f"{path}: not a checkpoint file")
    header_end = raw.index(b"\n", marker + 1)
    header_lines = raw[:header_end].decode("utf-8").splitlines()
    binary = raw[header_end + 1:]

    fields_seen: dict[str, str] = {}
    pseudo: dict[int, int] = {}
    config_raw: dict[str, str] = {}
    params: list[tuple[str, tuple[int, ...]]] = []
    for line in header_lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "pseudo":
            sid, cls = rest.split()
            pseudo[int(sid)] = int(cls)
        elif kind == "config":
            key, _, value = rest.partition(" ")
            config_raw[key] = value
        elif kind == "param":
            name, _, shape = rest.rpartition(" ")
            params.append((name, tuple(int(d) for d in shape.split(",")) if shape else ()))
        else:
            fields_seen[kind] = rest

    try:
        stored_digest = fields_seen["digest"]
        epoch = int(fields_seen["epoch"])
        train_step = int(fields_seen["train_step"])
        opt_iteration = int(fields_seen["opt_iteration"])
        pseudo_next = int(fields_seen["pseudo_next"])
        total_floats = int(fields_seen["binary"])
        calibration_raw = fields_seen["calibration"]
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: incomplete checkpoint header") from exc

    modality_dims = tuple(int(d) for d in config_raw.pop("modality_dims").split(","))
    num_classes = int(config_raw.pop("num_classes"))
    config = TrainConfig.from_dict(config_raw)
    if config_digest(config, modality_dims, num_classes) != stored_digest:
        raise CheckpointMismatchError(f"{path}: config digest mismatch")

    calibration = None
    if calibration_raw != "none":
        eps_raw, min_pts_raw = calibration_raw.split()
        calibration = ClusterParams(float(eps_raw), int(min_pts_raw))

    if len(binary) != total_floats * 8:
        raise DataFormatError(f"{path}: truncated or oversized payload "
                              f"({len(binary)} bytes for {total_floats} floats)")
    flat = np.frombuffer(binary, dtype="<f8")
    sizes = [int(np.prod(shape)) if shape else 1 for _, shape in params]
    per_section = sum(sizes)
    if per_section * 3 != total_floats:
        raise DataFormatError(f"{path}: parameter shapes do not match payload size")

    def read_section(offset: int) -> list[np.ndarray]:
        arrays = []
        cursor = offset
        for (_, shape), size in zip(params, sizes):
            arrays.append(flat[cursor:cursor + size].reshape(shape).copy())
            cursor += size
        return arrays

    return CheckpointData(
        config=config, modality_dims=modality_dims, num_classes=num_classes,
        epoch=epoch, train_step=train_step, opt_iteration=opt_iteration,
        calibration=calibration, pseudo_labels=pseudo, pseudo_next=pseudo_next,
        param_names=[name for name, _ in params],
        param_values=read_section(0),
        adam_m=read_section(per_section),
        adam_v=read_section(2 * per_section))


def resume_trainer(dataset: Dataset, checkpoint: CheckpointData) -> Trainer:
    """Rebuild a trainer mid-run; subsequent training is bit-identical to an
    uninterrupted run with the same config."""
    dims = tuple(spec.dim for spec in dataset.specs)
    if dims != checkpoint.modality_dims or dataset.num_classes != checkpoint.num_classes:
        raise CheckpointMismatchError(
            f"checkpoint was trained on modalities {checkpoint.modality_dims} with "
            f"{checkpoint.num_classes} classes; dataset has {dims} and {dataset.num_classes}")
    trainer = Trainer(dataset, checkpoint.config)
    names = [p.name for p in trainer.params]
    if names != checkpoint.param_names:
        raise CheckpointMismatchError("checkpoint parameters do not match the model")
    for p, value in zip(trainer.params, checkpoint.param_values):
        if p.data.shape != value.shape:
            raise CheckpointMismatchError(f"parameter {p.name} has shape {p.data.shape}, "
                                          f"checkpoint holds {value.shape}")
    for i, (p, value) in enumerate(zip(trainer.params, checkpoint.param_values)):
        p.data[...] = value
        trainer.optimizer.m[i][...] = checkpoint.adam_m[i]
        trainer.optimizer.v[i][...] = checkpoint.adam_v[i]
    trainer.optimizer.iteration = checkpoint.opt_iteration
    trainer.epoch = checkpoint.epoch
    trainer.train_step = checkpoint.train_step
    trainer.pretrained = True
    trainer.base_cluster_params = checkpoint.calibration
    trainer.store = PseudoLabelStore(dataset.labeled_classes)
    trainer.store.next_fresh_id = checkpoint.pseudo_next
    trainer.store.labels.update(checkpoint.pseudo_labels)
    return trainer
