"""Density clustering and the strict-to-loose pseudo-labeling engine.

Per epoch, the fused feature vectors of all samples without ground truth are
clustered with DBSCAN; non-noise clusters yield generated labels. Labels are
write-once: a sample that turns noisy in a later epoch keeps the label it
already earned, and a cluster that straddles frozen and fresh points passes
its majority frozen label to the fresh ones. Each epoch runs with a looser
radius and a smaller density threshold than the last, so coverage of the
unlabeled pool only ever grows.

Hyperparameters start from a grid search on the labeled features against
their ground-truth classes (radius candidates from k-nearest-neighbor
distance quantiles, density thresholds from a small fixed set), scored by
match-relabeled accuracy of the non-noise points.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ConfigError, ShapeError
from .evaluation import hungarian_match

NOISE = -1

EPS_QUANTILES = tuple(q / 100.0 for q in range(5, 55, 5))
MIN_PTS_GRID = (3, 4, 5, 8, 10)


@dataclass(frozen=True)
class ClusterParams:
    eps: float
    min_pts: int

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ConfigError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass(frozen=True)
class RelaxationSchedule:
    """Per-epoch loosening: radius grows geometrically, density threshold
    shrinks linearly down to a floor."""

    eps_growth: float = 1.05
    min_pts_step: int = 1
    min_pts_floor: int = 2

    def __post_init__(self):
        if self.eps_growth <= 1.0:
            raise ConfigError(f"eps_growth must exceed 1, got {self.eps_growth}")
        if self.min_pts_step < 0 or self.min_pts_floor < 1:
            raise ConfigError("min_pts_step must be >= 0 and min_pts_floor >= 1")


def relax(params: ClusterParams, schedule: RelaxationSchedule, epoch: int) -> ClusterParams:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    # a floor above the starting threshold would tighten epoch 0; clamp it
    floor = min(schedule.min_pts_floor, params.min_pts)
    return ClusterParams(params.eps * schedule.eps_growth ** epoch,
                         max(floor, params.min_pts - schedule.min_pts_step * epoch))


def _pairwise_sq_distances(points: np.ndarray) -> np.ndarray:
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    return np.maximum(d2, 0.0)


def dbscan(points, params: ClusterParams) -> np.ndarray:
    """Cluster with Euclidean DBSCAN; returns one id per point, NOISE = -1.

    A point is core when at least min_pts points (itself included) lie within
    eps. Clusters are grown from the lowest-index unclaimed core point, so a
    border point in reach of several clusters joins the earliest-built one.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    if points.ndim != 2:
        raise ShapeError(f"points must be 2-D, got shape {points.shape}")

    d2 = _pairwise_sq_distances(points)
    eps_sq = params.eps * params.eps
    neighbors = [np.flatnonzero(d2[i] <= eps_sq) for i in range(n)]
    core = np.array([nb.size >= params.min_pts for nb in neighbors])

    claimed = np.zeros(n, dtype=bool)
    cluster_id = 0
    for i in range(n):
        if claimed[i] or not core[i]:
            continue
        claimed[i] = True
        labels[i] = cluster_id
        queue = deque([i])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue  # border points are claimed but never expanded
            for q in neighbors[p]:
                if not claimed[q]:
                    claimed[q] = True
                    labels[q] = cluster_id
                    queue.append(q)
        cluster_id += 1
    return labels


def calibrate(features, labels, *, min_pts_grid=MIN_PTS_GRID,
              eps_quantiles=EPS_QUANTILES) -> ClusterParams:
    """Grid-search DBSCAN hyperparameters on labeled features.

    Radius candidates are quantiles of the distance to each point's k-th
    nearest neighbor (k = the density threshold under test). The winning
    cell maximizes match-relabeled accuracy over non-noise points, breaking
    ties by lower noise fraction, then smaller radius.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} do not match labels {labels.shape}")
    if np.unique(labels).size < 2:
        raise ConfigError("calibration needs at least 2 labeled classes")

    n = features.shape[0]
    distances = np.sqrt(_pairwise_sq_distances(features))
    sorted_rows = np.sort(distances, axis=1)  # column 0 is the self distance

    best_params = None
    best_key = None
    for min_pts in min_pts_grid:
        if min_pts >= n:
            continue
        kth = sorted_rows[:, min_pts]
        for q in eps_quantiles:
            eps = float(np.quantile(kth, q))
            if eps <= 0.0:
                continue
            assignment = dbscan(features, ClusterParams(eps, min_pts))
            mask = assignment != NOISE
            if not mask.any():
                continue
            _, matched = hungarian_match(assignment[mask], labels[mask])
            accuracy = matched / int(mask.sum())
            noise_fraction = 1.0 - mask.mean()
            key = (accuracy, -noise_fraction, -eps)
            if best_key is None or key > best_key:
                best_key = key
                best_params = ClusterParams(eps, min_pts)
    if best_params is None:
        raise CalibrationError("every grid cell produced 100% noise; features unusable")
    return best_params


class ActionMemory:
    """Per-epoch store of fused feature vectors keyed by sample id."""

    def __init__(self):
        self._actions: dict[int, np.ndarray] = {}
        self._dim: int | None = None

    def store(self, sample_id: int, action) -> None:
        action = np.asarray(action, dtype=np.float64)
        if action.ndim != 1:
            raise ShapeError(f"action must be a vector, got shape {action.shape}")
        if self._dim is None:
            self._dim = action.shape[0]
        elif action.shape[0] != self._dim:
            raise ShapeError(f"action dim {action.shape[0]} != expected {self._dim}")
        if sample_id in self._actions:
            raise ValueError(f"sample {sample_id} already stored an action this epoch")
        self._actions[sample_id] = action.copy()

    def get(self, sample_id: int) -> np.ndarray:
        return self._actions[sample_id]

    def ids(self) -> list[int]:
        return list(self._actions)

    def clear(self) -> None:
        self._actions.clear()

    def __len__(self) -> int:
        return len(self._actions)

    def __contains__(self, sample_id: int) -> bool:
        return sample_id in self._actions


class PseudoLabelStore:
    """Write-once map from sample id to generated class id.

    Generated ids start at first_fresh_id (one past the ground-truth range)
    and only ever increase, so they can never collide with real labels.
    """

    def __init__(self, first_fresh_id: int):
        self.first_fresh_id = first_fresh_id
        self.next_fresh_id = first_fresh_id
        self.labels: dict[int, int] = {}

    def get(self, sample_id: int) -> int | None:
        return self.labels.get(sample_id)

    def assign(self, sample_id: int, class_id: int) -> None:
        if sample_id in self.labels:
            raise ValueError(f"sample {sample_id} already frozen to "
                             f"{self.labels[sample_id]}; labels are write-once")
        if class_id < self.first_fresh_id:
            raise ValueError(f"generated label {class_id} collides with ground-truth ids")
        self.labels[sample_id] = class_id

    def allocate_fresh(self) -> int:
        fresh = self.next_fresh_id
        self.next_fresh_id += 1
        return fresh

    def coverage(self, total_unlabeled: int) -> float:
        return len(self.labels) / total_unlabeled if total_unlabeled else 0.0

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EpochClusterStats:
    eps: float
    min_pts: int
    clusters_found: int
    new_labels: int
    noise_points: int
    skipped: int  # all-fresh clusters left unlabeled (budget or id space)


def assign_pseudo_labels(memory: ActionMemory, store: PseudoLabelStore,
                         params: ClusterParams, ground_truth_ids: set[int],
                         max_class_id: int | None = None,
                         max_fresh: int | None = None) -> EpochClusterStats:
    """Cluster the epoch's stored actions and freeze labels for non-noise points.

    Clusters containing already-frozen members hand their majority frozen
    label (ties to the lowest id) to the unfrozen members. All-fresh clusters
    receive newly allocated ids; with max_fresh set, only the largest
    max_fresh of them (ties to the lowest member id) are labeled this epoch,
    which keeps transient fragments of a class from burning several ids in
    one pass. Clusters that would push ids past max_class_id are skipped.
    The memory is cleared before returning.
    """
    candidate_ids = sorted(sid for sid in memory.ids() if sid not in ground_truth_ids)
    if not candidate_ids:
        memory.clear()
        return EpochClusterStats(params.eps, params.min_pts, 0, 0, 0, 0)

    points = np.stack([memory.get(sid) for sid in candidate_ids])
    assignment = dbscan(points, params)
    clusters_found = int(assignment.max()) + 1 if assignment.size and assignment.max() >= 0 else 0

    adopting: list[tuple[int, list[int]]] = []   # (majority frozen label, members)
    fresh_clusters: list[list[int]] = []
    for cid in range(clusters_found):
        members = [candidate_ids[i] for i in np.flatnonzero(assignment == cid)]
        frozen = [store.get(sid) for sid in members if store.get(sid) is not None]
        if frozen:
            counts = Counter(frozen)
            label = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))[0]
            adopting.append((label, members))
        else:
            fresh_clusters.append(members)

    fresh_clusters.sort(key=lambda members: (-len(members), members[0]))
    budget = len(fresh_clusters) if max_fresh is None else max_fresh

    new_labels = 0
    skipped = 0
    for label, members in adopting:
        for sid in members:
            if store.get(sid) is None:
                store.assign(sid, label)
                new_labels += 1
    for members in fresh_clusters:
        if budget <= 0 or (max_class_id is not None and store.next_fresh_id > max_class_id):
            skipped += 1
            continue
        budget -= 1
        label = store.allocate_fresh()
        for sid in members:
            store.assign(sid, label)
            new_labels += 1

    noise_points = int(np.count_nonzero(assignment == NOISE))
    memory.clear()
    return EpochClusterStats(params.eps, params.min_pts, clusters_found,
                             new_labels, noise_points, skipped)
