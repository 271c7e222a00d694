"""Retrieval metrics, matched clustering accuracy, and PCA export."""

import itertools
import math
import warnings

import numpy as np
import pytest

from mmncd.evaluation import (PcaResult, QueryRanking, RetrievalRun, anmrr, build_run,
                              export_embeddings, hungarian_match, map_metric,
                              ncd_accuracy, ndcg_at, nn_metric, pca_project, pr_curve)
from mmncd.errors import DegenerateVectorError, ProtocolError, ShapeError


def run_from_relevance(rows):
    """Build a run directly from binary relevance vectors (one per query)."""
    queries = []
    for qid, rel in enumerate(rows):
        rel = np.asarray(rel, dtype=np.int64)
        queries.append(QueryRanking(qid, 0, np.arange(rel.size), rel))
    return RetrievalRun(queries)


# --- direct-enumeration oracles -------------------------------------------

def oracle_ap(rel):
    hits = 0
    total = 0.0
    for rank, r in enumerate(rel, start=1):
        if r:
            hits += 1
            total += hits / rank
    return total / sum(rel)


def oracle_ndcg(rel, k):
    dcg = sum(r / math.log2(i + 1) for i, r in enumerate(rel[:k], start=1))
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(sum(rel), k) + 1))
    return dcg / ideal if ideal else 0.0


def oracle_nmrr(rel, max_ng):
    ng = sum(rel)
    cap = min(4 * ng, 2 * max_ng)
    ranks = [i for i, r in enumerate(rel, start=1) if r]
    avr = sum(r if r <= cap else 1.25 * cap for r in ranks) / ng
    mrr = avr - 0.5 - ng / 2.0
    return mrr / (1.25 * cap - 0.5 - ng / 2.0)


def oracle_interp_precision(rel, grid):
    cum = 0
    points = []
    for rank, r in enumerate(rel, start=1):
        cum += r
        points.append((cum / sum(rel), cum / rank))
    return [max((p for rec, p in points if rec >= g), default=0.0) for g in grid]


class TestBuildRun:
    def test_identical_target_ranks_first(self):
        q = np.array([[1.0, 0.0]])
        targets = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        run = build_run(q, [0], targets, [1, 0, 1])
        assert run.queries[0].ranked_ids[0] == 1
        assert run.queries[0].relevance[0] == 1

    def test_equal_similarity_breaks_by_lower_id(self):
        q = np.array([[1.0, 0.0]])
        targets = np.array([[2.0, 0.0], [3.0, 0.0]])  # both cosine 1.0
        run = build_run(q, [0], targets, [0, 0], target_ids=[7, 4])
        assert list(run.queries[0].ranked_ids[:2]) == [4, 7]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(1, 4))
        targets = rng.normal(size=(5, 4))
        run = build_run(q, [0], targets, [0, 1, 0, 1, 0])
        sims = (targets / np.linalg.norm(targets, axis=1, keepdims=True)) \
            @ (q[0] / np.linalg.norm(q[0]))
        expected = sorted(range(5), key=lambda i: (-sims[i], i))
        assert list(run.queries[0].ranked_ids) == expected

    def test_zero_norm_feature_rejected(self):
        with pytest.raises(DegenerateVectorError):
            build_run(np.zeros((1, 3)), [0], np.ones((2, 3)), [0, 0])


class TestNN:
    def test_all_hits(self):
        assert nn_metric(run_from_relevance([[1, 0], [1, 1]])) == 1.0

    def test_no_hits(self):
        assert nn_metric(run_from_relevance([[0, 1], [0, 1]])) == 0.0

    def test_half(self):
        assert nn_metric(run_from_relevance([[1, 0], [0, 1]])) == 0.5


class TestMap:
    def test_documented_case(self):
        assert map_metric(run_from_relevance([[1, 0, 1]])) == pytest.approx(5 / 6)

    def test_perfect_ranking(self):
        assert map_metric(run_from_relevance([[1, 1, 0, 0]])) == 1.0

    def test_single_relevant_at_rank(self):
        for rank in range(1, 6):
            rel = [0] * 5
            rel[rank - 1] = 1
            assert map_metric(run_from_relevance([rel])) == pytest.approx(1.0 / rank)

    def test_zero_relevant_rejected(self):
        with pytest.raises(ProtocolError):
            map_metric(run_from_relevance([[0, 0]]))


class TestNdcg:
    def test_perfect(self):
        assert ndcg_at(run_from_relevance([[1, 1, 0]]), k=3) == pytest.approx(1.0)

    def test_zero_in_topk(self):
        assert ndcg_at(run_from_relevance([[0, 0, 1]]), k=2) == 0.0

    def test_documented_case(self):
        value = ndcg_at(run_from_relevance([[0, 1]]), k=2)
        assert value == pytest.approx(1.0 / math.log2(3.0), abs=1e-9)
        assert value == pytest.approx(0.63093, abs=1e-5)


class TestAnmrr:
    def test_perfect_is_zero(self):
        assert anmrr(run_from_relevance([[1, 1, 1, 0, 0, 0]])) == pytest.approx(0.0, abs=1e-12)

    def test_all_beyond_cap_is_one(self):
        # NG=1 -> K=2; the only relevant item at rank 5 is fully penalized
        assert anmrr(run_from_relevance([[0, 0, 0, 0, 1]])) == pytest.approx(1.0, abs=1e-12)

    def test_worse_rank_never_decreases(self):
        # lower is better: pushing a relevant item down never helps
        for rel in itertools.product([0, 1], repeat=5):
            if sum(rel) in (0, 5):
                continue
            base = anmrr(run_from_relevance([list(rel)]))
            for i in range(5):
                for j in range(i + 1, 5):
                    if rel[i] == 1 and rel[j] == 0:
                        worse = list(rel)
                        worse[i], worse[j] = worse[j], worse[i]
                        assert anmrr(run_from_relevance([worse])) >= base - 1e-12


class TestPrCurve:
    def test_perfect_ranking_is_all_ones(self):
        recalls, precisions = pr_curve(run_from_relevance([[1, 1, 0, 0]]))
        assert recalls.size == 101
        assert np.allclose(precisions, 1.0)

    def test_monotone_non_increasing(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            rel = (rng.random(8) < 0.4).astype(int)
            if rel.sum() == 0:
                rel[3] = 1
            _, precisions = pr_curve(run_from_relevance([rel]))
            assert np.all(np.diff(precisions) <= 1e-12)

    def test_documented_interpolation_case(self):
        recalls, precisions = pr_curve(run_from_relevance([[1, 0, 1]]))
        assert precisions[100] == pytest.approx(2 / 3)
        assert precisions[0] == 1.0


class TestMetricOracles:
    def test_random_runs_match_direct_enumeration(self):
        rng = np.random.default_rng(42)
        grid = np.linspace(0.0, 1.0, 101)
        for _ in range(60):
            n_queries = int(rng.integers(1, 5))
            n_targets = int(rng.integers(2, 21))
            rows = []
            for _ in range(n_queries):
                rel = (rng.random(n_targets) < 0.35).astype(int)
                if rel.sum() == 0:
                    rel[int(rng.integers(n_targets))] = 1
                rows.append(rel)
            run = run_from_relevance(rows)
            max_ng = max(int(np.sum(r)) for r in rows)
            assert map_metric(run) == pytest.approx(
                np.mean([oracle_ap(r) for r in rows]), abs=1e-9)
            assert nn_metric(run) == pytest.approx(
                np.mean([r[0] for r in rows]), abs=1e-9)
            assert ndcg_at(run, 100) == pytest.approx(
                np.mean([oracle_ndcg(list(r), 100) for r in rows]), abs=1e-9)
            assert anmrr(run) == pytest.approx(
                np.mean([oracle_nmrr(list(r), max_ng) for r in rows]), abs=1e-9)
            _, precisions = pr_curve(run)
            expected = np.mean([oracle_interp_precision(list(r), grid) for r in rows], axis=0)
            assert np.max(np.abs(precisions - expected)) <= 1e-9

    def test_improving_a_rank_is_monotone_for_all_metrics(self):
        for rel in itertools.product([0, 1], repeat=5):
            if sum(rel) in (0, 5):
                continue
            base = run_from_relevance([list(rel)])
            for i in range(5):
                for j in range(i + 1, 5):
                    if rel[i] == 0 and rel[j] == 1:
                        better = list(rel)
                        better[i], better[j] = better[j], better[i]
                        improved = run_from_relevance([better])
                        assert map_metric(improved) >= map_metric(base) - 1e-12
                        assert nn_metric(improved) >= nn_metric(base) - 1e-12
                        assert ndcg_at(improved, 5) >= ndcg_at(base, 5) - 1e-12
                        assert anmrr(improved) <= anmrr(base) + 1e-12


class TestNcdAccuracy:
    def test_relabeling_invariance(self):
        truth = np.array([0, 0, 1, 1, 2, 2])
        predicted = np.array([5, 5, 9, 9, 7, 7])
        assert ncd_accuracy(predicted, truth) == 1.0

    def test_single_cluster_two_balanced_classes(self):
        truth = np.array([0, 0, 1, 1])
        predicted = np.array([3, 3, 3, 3])
        assert ncd_accuracy(predicted, truth) == 0.5

    def test_unlabeled_counts_as_error(self):
        truth = np.array([0, 0, 1, 1])
        predicted = np.array([2, 2, -1, -1])
        assert ncd_accuracy(predicted, truth) == 0.5

    def test_all_unlabeled(self):
        assert ncd_accuracy(np.array([-1, -1]), np.array([0, 1])) == 0.0

    def test_matches_exhaustive_permutation_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            k = int(rng.integers(2, 7))
            n = int(rng.integers(k, 40))
            truth = rng.integers(0, k, size=n)
            predicted = rng.integers(0, k, size=n)
            best = 0
            for perm in itertools.permutations(range(k)):
                mapped = np.array([perm[p] for p in predicted])
                best = max(best, int(np.sum(mapped == truth)))
            assert ncd_accuracy(predicted, truth) == pytest.approx(best / n)

    def test_surplus_clusters_map_to_nothing(self):
        truth = np.array([0, 0, 0, 0])
        predicted = np.array([1, 1, 2, 3])
        # only one predicted id can map to class 0
        assert ncd_accuracy(predicted, truth) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ncd_accuracy(np.array([1]), np.array([1, 2]))


class TestHungarianMatch:
    def test_mapping_is_injective(self):
        predicted = np.array([0, 0, 1, 1, 2, 2])
        truth = np.array([4, 4, 4, 5, 5, 6])
        mapping, matched = hungarian_match(predicted, truth)
        assert len(set(mapping.values())) == len(mapping)
        # 0->4 (2 hits), then the one-to-one constraint leaves 1->5 and 2->6
        assert matched == 4


class TestPca:
    def test_axis_aligned_recovery(self):
        rng = np.random.default_rng(0)
        data = np.zeros((200, 2))
        data[:, 0] = rng.normal(size=200) * 5.0
        data[:, 1] = rng.normal(size=200) * 0.5
        result = pca_project(data, dims=2)
        # first component aligns with the high-variance axis, up to sign and
        # the small rotation induced by sampling noise
        assert abs(result.components[0, 0]) == pytest.approx(1.0, abs=1e-2)
        assert abs(result.components[1, 1]) == pytest.approx(1.0, abs=1e-2)

    def test_component_variances_non_increasing(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(100, 6)) @ rng.normal(size=(6, 6))
        result = pca_project(data, dims=6)
        variances = result.coords.var(axis=0)
        assert np.all(np.diff(variances) <= 1e-10)

    def test_reconstruction_error_equals_discarded_eigenvalues(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(80, 5)) @ rng.normal(size=(5, 5))
        dims = 2
        result = pca_project(data, dims=dims)
        centered = data - result.mean
        reconstructed = result.coords @ result.components.T
        error = ((centered - reconstructed) ** 2).sum() / data.shape[0]
        assert error == pytest.approx(result.eigenvalues[dims:].sum(), abs=1e-8)

    def test_degenerate_covariance_warns_and_zero_fills(self):
        data = np.ones((10, 3))
        data[:, 0] = np.arange(10.0)
        with pytest.warns(UserWarning, match="rank"):
            result = pca_project(data, dims=3)
        assert np.allclose(result.coords[:, 1:], 0.0)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ShapeError):
            pca_project(np.ones((1, 3)), dims=2)


class TestExports:
    def test_embeddings_csv_schema(self, tmp_path):
        rng = np.random.default_rng(4)
        path = tmp_path / "emb.csv"
        export_embeddings(rng.normal(size=(6, 4)), [0, 0, 1, 1, 2, 2], path,
                          ids=[10, 11, 12, 13, 14, 15])
        lines = path.read_text().splitlines()
        assert lines[0] == "id,c0,c1,label"
        assert len(lines) == 7
        assert lines[1].startswith("10,")
        # 6 significant digits formatting
        for cell in lines[1].split(",")[1:3]:
            assert len(cell.replace("-", "").replace(".", "").replace("e", "").lstrip("0")) <= 7
