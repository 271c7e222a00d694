"""Open-set retrieval metrics, matched clustering accuracy, and PCA export.

Retrieval runs rank the full target set for every query by descending cosine
similarity of fused feature vectors (ties broken by ascending target id);
the metrics below consume those rankings. Clustering/classification accuracy
on discovered classes uses an optimal one-to-one matching between predicted
ids and true classes, so all scores are invariant under relabeling.

CSV outputs print numbers with 6 significant digits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateVectorError, ProtocolError, ShapeError

UNLABELED_PREDICTION = -1


@dataclass
class QueryRanking:
    query_id: int
    query_class: int
    ranked_ids: np.ndarray   # target ids, best match first
    relevance: np.ndarray    # 1 where the target shares the query's class


@dataclass
class RetrievalRun:
    queries: list[QueryRanking]


def _normalized(features: np.ndarray, what: str) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"{what} features must be 2-D, got shape {features.shape}")
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateVectorError(f"{what} features contain a (near-)zero vector")
    return features / norms[:, None]


def build_run(query_features, query_classes, target_features, target_classes,
              query_ids=None, target_ids=None) -> RetrievalRun:
    """Rank all targets for each query by cosine similarity."""
    q = _normalized(query_features, "query")
    t = _normalized(target_features, "target")
    if q.shape[1] != t.shape[1]:
        raise ShapeError(f"feature widths differ: {q.shape[1]} vs {t.shape[1]}")
    query_classes = np.asarray(query_classes)
    target_classes = np.asarray(target_classes)
    query_ids = np.arange(q.shape[0]) if query_ids is None else np.asarray(query_ids)
    target_ids = np.arange(t.shape[0]) if target_ids is None else np.asarray(target_ids)

    similarities = q @ t.T
    queries = []
    for i in range(q.shape[0]):
        # primary key: similarity descending; secondary: target id ascending
        order = np.lexsort((target_ids, -similarities[i]))
        ranked = target_ids[order]
        relevance = (target_classes[order] == query_classes[i]).astype(np.int64)
        queries.append(QueryRanking(int(query_ids[i]), int(query_classes[i]), ranked, relevance))
    return RetrievalRun(queries)


def nn_metric(run: RetrievalRun) -> float:
    """Fraction of queries whose top-ranked target is relevant."""
    if not run.queries:
        raise ProtocolError("empty retrieval run")
    return float(np.mean([q.relevance[0] for q in run.queries]))


def map_metric(run: RetrievalRun) -> float:
    """Mean over queries of the average precision at each relevant rank."""
    scores = []
    for q in run.queries:
        hits = np.flatnonzero(q.relevance) + 1  # 1-based ranks of relevant items
        if hits.size == 0:
            raise ProtocolError(f"query {q.query_id} has no relevant targets")
        precisions = np.arange(1, hits.size + 1) / hits
        scores.append(precisions.mean())
    return float(np.mean(scores))


def ndcg_at(run: RetrievalRun, k: int = 100) -> float:
    """Binary-gain NDCG truncated at rank k, averaged over queries."""
    if k < 1:
        raise ProtocolError("ndcg cutoff must be >= 1")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    scores = []
    for q in run.queries:
        total_relevant = int(q.relevance.sum())
        if total_relevant == 0:
            scores.append(0.0)
            continue
        gains = q.relevance[:k]
        dcg = float((gains * discounts[:gains.size]).sum())
        ideal = float(discounts[:min(total_relevant, k)].sum())
        scores.append(dcg / ideal)
    return float(np.mean(scores))


def anmrr(run: RetrievalRun) -> float:
    """Average normalized modified retrieval rank; 0 is perfect, 1 is worst.

    Per query with NG relevant targets, ranks beyond K = min(4*NG, 2*max_NG)
    are penalized as 1.25*K; the average retrieval rank is then shifted and
    scaled so a perfect ranking scores 0 and a fully penalized one scores 1.
    """
    counts = [int(q.relevance.sum()) for q in run.queries]
    if not counts or min(counts) == 0:
        raise ProtocolError("every query needs at least one relevant target")
    max_ng = max(counts)
    scores = []
    for q, ng in zip(run.queries, counts):
        cap = min(4 * ng, 2 * max_ng)
        ranks = (np.flatnonzero(q.relevance) + 1).astype(np.float64)
        ranks[ranks > cap] = 1.25 * cap
        avr = ranks.mean()
        mrr = avr - 0.5 - ng / 2.0
        worst = 1.25 * cap - 0.5 - ng / 2.0
        scores.append(mrr / worst)
    return float(np.mean(scores))


def pr_curve(run: RetrievalRun) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated precision over a 101-point recall grid, averaged over queries."""
    recall_grid = np.linspace(0.0, 1.0, 101)
    per_query = []
    for q in run.queries:
        total_relevant = int(q.relevance.sum())
        if total_relevant == 0:
            raise ProtocolError(f"query {q.query_id} has no relevant targets")
        cum = np.cumsum(q.relevance)
        ranks = np.arange(1, q.relevance.size + 1)
        precision = cum / ranks
        recall = cum / total_relevant
        # interpolated precision: best precision at any cutoff reaching recall >= r
        interp = np.empty_like(recall_grid)
        for gi, r in enumerate(recall_grid):
            feasible = precision[recall >= r]
            interp[gi] = feasible.max() if feasible.size else 0.0
        per_query.append(interp)
    return recall_grid, np.mean(per_query, axis=0)


def hungarian_match(predicted, truth) -> tuple[dict[int, int], int]:
    """Best one-to-one mapping predicted id -> true class and its agreement count."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    pred_values = np.unique(predicted)
    true_values = np.unique(truth)
    contingency = np.zeros((pred_values.size, true_values.size), dtype=np.int64)
    for i, pv in enumerate(pred_values):
        mask = predicted == pv
        for j, tv in enumerate(true_values):
            contingency[i, j] = int(np.count_nonzero(truth[mask] == tv))
    rows, cols = linear_sum_assignment(contingency, maximize=True)
    mapping = {int(pred_values[r]): int(true_values[c]) for r, c in zip(rows, cols)}
    matched = int(contingency[rows, cols].sum())
    return mapping, matched


def ncd_accuracy(predicted, truth, unlabeled: int = UNLABELED_PREDICTION) -> float:
    """Accuracy of discovered-class assignments under the optimal one-to-one
    relabeling; samples still carrying the unlabeled marker count as errors."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ShapeError(f"label vectors differ in length: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        return 0.0
    mask = predicted != unlabeled
    if not mask.any():
        return 0.0
    _, matched = hungarian_match(predicted[mask], truth[mask])
    return matched / predicted.size


@dataclass
class PcaResult:
    coords: np.ndarray       # (n, dims) projection
    components: np.ndarray   # (d, dims) eigenvectors, strongest first
    mean: np.ndarray         # (d,) feature mean
    eigenvalues: np.ndarray  # all d eigenvalues, descending


def pca_project(features, dims: int = 2) -> PcaResult:
    """Project onto the top principal components of the feature covariance.

    If the covariance rank falls below dims, the surplus coordinates are
    zero-filled and a warning is issued.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < dims or x.shape[1] < dims:
        raise ShapeError(f"need at least {dims} samples and {dims} feature dims, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / x.shape[0]
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.maximum(eigenvalues[order], 0.0)
    eigenvectors = eigenvectors[:, order]

    threshold = eigenvalues[0] * 1e-10 + 1e-30
    rank = int((eigenvalues > threshold).sum())
    components = eigenvectors[:, :dims].copy()
    if rank < dims:
        warnings.warn(f"covariance rank {rank} below requested {dims} components; "
                      "zero-filling the remainder", stacklevel=2)
        components[:, rank:] = 0.0
    return PcaResult(centered @ components, components, mean, eigenvalues)


def format_sig(value: float) -> str:
    return format(float(value), ".6g")


def export_embeddings(features, labels, path, ids=None, dims: int = 2) -> PcaResult:
    """Write a CSV of (id, projected coordinates, label)."""
    result = pca_project(features, dims)
    n = result.coords.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    labels = np.asarray(labels)
    header = "id," + ",".join(f"c{j}" for j in range(dims)) + ",label"
    lines = [header]
    for i in range(n):
        coords = ",".join(format_sig(v) for v in result.coords[i])
        lines.append(f"{int(ids[i])},{coords},{labels[i]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return result


def write_pr_curve(path, recalls, precisions) -> None:
    lines = ["recall,precision"]
    lines.extend(f"{format_sig(r)},{format_sig(p)}" for r, p in zip(recalls, precisions))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_metrics_summary(path, metrics: dict) -> None:
    keys = list(metrics)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(format_sig(metrics[k]) if isinstance(metrics[k], float)
                          else str(metrics[k]) for k in keys) + "\n")


def evaluate_features(query_features, query_classes, target_features, target_classes,
                      query_ids=None, target_ids=None) -> tuple[dict[str, float], RetrievalRun]:
    """All retrieval metrics for one query/target feature split."""
    run = build_run(query_features, query_classes, target_features, target_classes,
                    query_ids, target_ids)
    metrics = {
        "map": map_metric(run),
        "nn": nn_metric(run),
        "ndcg": ndcg_at(run, 100),
        "anmrr": anmrr(run),
    }
    return metrics, run
