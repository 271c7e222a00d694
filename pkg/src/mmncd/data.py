"""Synthetic multi-modal datasets with an open-set labeled/novel class split.

Every object is a set of per-modality observation vectors derived from one
shared latent point: class means are drawn in a latent space, each sample
perturbs its class mean, and each modality observes the latent point through
a fixed random linear map plus noise. Classes below the labeled count carry
ground-truth labels; the remaining (novel) classes start unlabeled and their
true class is stored separately, to be read by evaluation code only — the
training path sees nothing but the per-sample label state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .seeding import substream

GROUND_TRUTH = "truth"
PSEUDO = "pseudo"
UNLABELED = "none"

_MAGIC = "#mmncd-dataset v1"
_MISSING = "missing"


@dataclass(frozen=True)
class ModalitySpec:
    modality_id: int
    dim: int


@dataclass
class MultiModalSample:
    """One object: per-modality vectors (None marks a missing modality) plus label state."""

    sample_id: int
    vectors: dict[int, np.ndarray | None]
    label_kind: str = UNLABELED
    label: int | None = None

    def present_modalities(self) -> list[int]:
        return [j for j, v in self.vectors.items() if v is not None]


@dataclass(frozen=True)
class GeneratorConfig:
    labeled_classes: int
    novel_classes: int
    samples_per_class: int
    latent_dim: int = 16
    modality_dims: tuple[int, ...] = (16, 16, 16, 16)
    class_separation: float = 10.0
    within_noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.labeled_classes < 0 or self.novel_classes < 0:
            raise ConfigError("class counts must be non-negative")
        if self.labeled_classes + self.novel_classes == 0:
            raise ConfigError("at least one class is required")
        if self.samples_per_class <= 0:
            raise ConfigError("samples_per_class must be positive")
        if self.latent_dim <= 0:
            raise ConfigError("latent_dim must be positive")
        if not self.modality_dims or any(d < 1 for d in self.modality_dims):
            raise ConfigError("modality dimensions must all be >= 1")
        if self.class_separation <= 0 or self.within_noise <= 0:
            raise ConfigError("class_separation and within_noise must be positive")


@dataclass
class Dataset:
    specs: list[ModalitySpec]
    samples: list[MultiModalSample]
    labeled_classes: int
    novel_classes: int
    seed: int
    # true class per sample id; evaluation-only, never consulted for training
    hidden_classes: dict[int, int] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.labeled_classes + self.novel_classes

    def sample_by_id(self, sample_id: int) -> MultiModalSample:
        return self._index()[sample_id]

    def _index(self) -> dict[int, MultiModalSample]:
        return {s.sample_id: s for s in self.samples}

    def labeled_samples(self) -> list[MultiModalSample]:
        return [s for s in self.samples if s.label_kind == GROUND_TRUTH]

    def unlabeled_samples(self) -> list[MultiModalSample]:
        return [s for s in self.samples if s.label_kind != GROUND_TRUTH]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.specs, self.labeled_classes, self.novel_classes, self.seed,
                self.hidden_classes) != (other.specs, other.labeled_classes,
                                         other.novel_classes, other.seed, other.hidden_classes):
            return False
        if len(self.samples) != len(other.samples):
            return False
        for a, b in zip(self.samples, other.samples):
            if (a.sample_id, a.label_kind, a.label) != (b.sample_id, b.label_kind, b.label):
                return False
            if set(a.vectors) != set(b.vectors):
                return False
            for j in a.vectors:
                va, vb = a.vectors[j], b.vectors[j]
                if (va is None) != (vb is None):
                    return False
                if va is not None and not np.array_equal(va, vb):
                    return False
        return True


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Draw a dataset per the shared-latent generative model, fixed by config.seed."""
    config.validate()
    rng = substream(config.seed, "data")
    total_classes = config.labeled_classes + config.novel_classes
    latent = config.latent_dim

    projections = [rng.normal(size=(latent, dim)) / math.sqrt(latent)
                   for dim in config.modality_dims]
    class_means = rng.normal(size=(total_classes, latent)) * config.class_separation

    specs = [ModalitySpec(j, dim) for j, dim in enumerate(config.modality_dims)]
    samples: list[MultiModalSample] = []
    hidden: dict[int, int] = {}
    sample_id = 0
    for cls in range(total_classes):
        for _ in range(config.samples_per_class):
            z = class_means[cls] + rng.normal(size=latent) * config.within_noise
            vectors: dict[int, np.ndarray | None] = {}
            for j, proj in enumerate(projections):
                noise = rng.normal(size=config.modality_dims[j]) * config.within_noise
                vectors[j] = z @ proj + noise
            if cls < config.labeled_classes:
                sample = MultiModalSample(sample_id, vectors, GROUND_TRUTH, cls)
            else:
                sample = MultiModalSample(sample_id, vectors)
            samples.append(sample)
            hidden[sample_id] = cls
            sample_id += 1
    return Dataset(specs, samples, config.labeled_classes, config.novel_classes,
                   config.seed, hidden)


def drop_modalities(ds: Dataset, p: float, seed: int) -> Dataset:
    """Mark each (sample, modality) missing with probability p, independently.

    A sample that would lose every modality keeps one, chosen uniformly among
    the modalities it had.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must be in [0, 1), got {p}")
    rng = substream(seed, "drop")
    new_samples = []
    for s in ds.samples:
        vectors: dict[int, np.ndarray | None] = {}
        present_before = s.present_modalities()
        for j, v in s.vectors.items():
            if v is None:
                vectors[j] = None
            else:
                vectors[j] = None if rng.random() < p else v.copy()
        if present_before and all(vectors[j] is None for j in present_before):
            keep = present_before[int(rng.integers(len(present_before)))]
            vectors[keep] = s.vectors[keep].copy()
        new_samples.append(MultiModalSample(s.sample_id, vectors, s.label_kind, s.label))
    return Dataset(list(ds.specs), new_samples, ds.labeled_classes, ds.novel_classes,
                   ds.seed, dict(ds.hidden_classes))


def mask_modality(ds: Dataset, modality_id: int) -> Dataset:
    """Mark one modality missing for every sample (single-modality ablation)."""
    if modality_id not in {spec.modality_id for spec in ds.specs}:
        raise ConfigError(f"unknown modality id {modality_id}")
    new_samples = []
    for s in ds.samples:
        vectors = {j: (None if j == modality_id else (v.copy() if v is not None else None))
                   for j, v in s.vectors.items()}
        if all(v is None for v in vectors.values()):
            raise ConfigError(f"masking modality {modality_id} would leave sample "
                              f"{s.sample_id} with no modalities")
        new_samples.append(MultiModalSample(s.sample_id, vectors, s.label_kind, s.label))
    return Dataset(list(ds.specs), new_samples, ds.labeled_classes, ds.novel_classes,
                   ds.seed, dict(ds.hidden_classes))


def split_query_target(ds: Dataset, per_class_queries: int, seed: int | None = None) -> tuple[list[int], list[int]]:
    """Partition sample ids into a query set (exactly per_class_queries per
    hidden class) and the remaining target set."""
    if per_class_queries < 1:
        raise ConfigError("per_class_queries must be >= 1")
    if seed is None:
        seed = ds.seed
    by_class: dict[int, list[int]] = {}
    for s in ds.samples:
        by_class.setdefault(ds.hidden_classes[s.sample_id], []).append(s.sample_id)
    query_ids: list[int] = []
    target_ids: list[int] = []
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        if len(ids) <= per_class_queries:
            raise ConfigError(f"class {cls} has only {len(ids)} samples, "
                              f"cannot reserve {per_class_queries} queries")
        order = substream(seed, f"split:{cls}").permutation(len(ids))
        query_ids.extend(ids[i] for i in order[:per_class_queries])
        target_ids.extend(ids[i] for i in order[per_class_queries:])
    return sorted(query_ids), sorted(target_ids)


def batch_iterator(ds, batch_size: int, seed: int, epoch: int):
    """Yield batches covering every sample exactly once, shuffled per (seed, epoch)."""
    samples = ds.samples if isinstance(ds, Dataset) else list(ds)
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if not samples:
        raise ConfigError("cannot iterate an empty dataset")
    order = substream(seed, f"batch:{epoch}").permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def num_batches(count: int, batch_size: int) -> int:
    return (count + batch_size - 1) // batch_size


def _format_vector(v: np.ndarray | None) -> str:
    if v is None:
        return _MISSING
    return ",".join(repr(float(x)) for x in v)


def save_dataset(ds: Dataset, path) -> None:
    lines = [_MAGIC]
    for spec in ds.specs:
        lines.append(f"modality {spec.modality_id} {spec.dim}")
    lines.append(f"classes labeled={ds.labeled_classes} novel={ds.novel_classes}")
    lines.append(f"seed {ds.seed}")
    lines.append(f"count {len(ds.samples)}")
    for s in ds.samples:
        label = f"{s.label_kind}" if s.label is None else f"{s.label_kind}:{s.label}"
        parts = [f"sample {s.sample_id}", f"hidden={ds.hidden_classes[s.sample_id]}",
                 f"label={label}"]
        for j in sorted(s.vectors):
            parts.append(f"m{j}={_format_vector(s.vectors[j])}")
        lines.append(" ".join(parts))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    """Parse a dataset file; any malformation raises before anything is returned."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise DataFormatError(f"{path}: line 1: expected header {_MAGIC!r}")

    specs: list[ModalitySpec] = []
    labeled = novel = seed = count = None
    i = 1
    while i < len(lines) and not lines[i].startswith("sample "):
        line, ln = lines[i], i + 1
        fields = line.split()
        try:
            if fields[0] == "modality":
                specs.append(ModalitySpec(int(fields[1]), int(fields[2])))
            elif fields[0] == "classes":
                labeled = int(fields[1].removeprefix("labeled="))
                novel = int(fields[2].removeprefix("novel="))
            elif fields[0] == "seed":
                seed = int(fields[1])
            elif fields[0] == "count":
                count = int(fields[1])
            else:
                raise DataFormatError(f"{path}: line {ln}: unknown record {fields[0]!r}")
        except (IndexError, ValueError) as exc:
            raise DataFormatError(f"{path}: line {ln}: malformed record: {line!r}") from exc
        i += 1
    if labeled is None or seed is None or count is None or not specs:
        raise DataFormatError(f"{path}: incomplete header")
    if [spec.modality_id for spec in specs] != list(range(len(specs))):
        raise DataFormatError(f"{path}: modality ids must be contiguous from 0")

    known = {spec.modality_id: spec.dim for spec in specs}
    samples: list[MultiModalSample] = []
    hidden: dict[int, int] = {}
    for line_no in range(i, len(lines)):
        line, ln = lines[line_no], line_no + 1
        if not line.strip():
            continue
        fields = line.split()
        if fields[0] != "sample":
            raise DataFormatError(f"{path}: line {ln}: expected a sample record")
        try:
            sid = int(fields[1])
            hidden_cls = int(fields[2].removeprefix("hidden="))
            label_field = fields[3].removeprefix("label=")
            if ":" in label_field:
                kind, _, raw = label_field.partition(":")
                label = int(raw)
            else:
                kind, label = label_field, None
            if kind not in (GROUND_TRUTH, PSEUDO, UNLABELED):
                raise ValueError(f"unknown label kind {kind!r}")
            vectors: dict[int, np.ndarray | None] = {}
            for part in fields[4:]:
                name, _, payload = part.partition("=")
                j = int(name.removeprefix("m"))
                if j not in known:
                    raise DataFormatError(f"{path}: line {ln}: unknown modality id {j}")
                if payload == _MISSING:
                    vectors[j] = None
                else:
                    vec = np.array([float(x) for x in payload.split(",")], dtype=np.float64)
                    if vec.shape[0] != known[j]:
                        raise ValueError(f"modality {j} has dim {vec.shape[0]}, expected {known[j]}")
                    vectors[j] = vec
        except DataFormatError:
            raise
        except (IndexError, ValueError) as exc:
            raise DataFormatError(f"{path}: line {ln}: malformed sample record") from exc
        if set(vectors) != set(known):
            raise DataFormatError(f"{path}: line {ln}: sample {sid} does not cover all modalities")
        if all(v is None for v in vectors.values()):
            raise DataFormatError(f"{path}: line {ln}: sample {sid} has no present modality")
        if kind == GROUND_TRUTH and (label is None or not 0 <= label < labeled):
            raise DataFormatError(f"{path}: line {ln}: ground-truth label {label} outside "
                                  f"the {labeled} labeled classes")
        if kind == PSEUDO and (label is None or label < labeled):
            raise DataFormatError(f"{path}: line {ln}: generated label {label} collides "
                                  f"with the labeled classes")
        if not 0 <= hidden_cls < labeled + novel:
            raise DataFormatError(f"{path}: line {ln}: hidden class {hidden_cls} out of range")
        samples.append(MultiModalSample(sid, vectors, kind, label))
        hidden[sid] = hidden_cls
    if count != len(samples):
        raise DataFormatError(f"{path}: header promises {count} samples, found {len(samples)}")
    return Dataset(specs, samples, labeled, novel, seed, hidden)
