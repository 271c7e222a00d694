"""Synthetic dataset generation, transforms, and file round-trips."""

import numpy as np
import pytest

from mmncd.data import (GROUND_TRUTH, UNLABELED, Dataset, GeneratorConfig,
                        batch_iterator, drop_modalities, generate_dataset,
                        load_dataset, mask_modality, save_dataset,
                        split_query_target)
from mmncd.errors import ConfigError, DataFormatError


def small_config(**overrides):
    base = dict(labeled_classes=2, novel_classes=2, samples_per_class=10,
                latent_dim=4, modality_dims=(5, 6), class_separation=10.0,
                within_noise=1.0, seed=0)
    base.update(overrides)
    return GeneratorConfig(**base)


class TestGenerate:
    def test_counts_and_all_ground_truth(self):
        ds = generate_dataset(small_config(labeled_classes=2, novel_classes=0,
                                           samples_per_class=3))
        assert len(ds.samples) == 6
        assert all(s.label_kind == GROUND_TRUTH for s in ds.samples)
        assert {s.label for s in ds.samples} == {0, 1}

    def test_same_seed_is_identical(self):
        assert generate_dataset(small_config()) == generate_dataset(small_config())

    def test_different_seed_differs(self):
        assert generate_dataset(small_config()) != generate_dataset(small_config(seed=1))

    def test_nearest_centroid_oracle_at_high_separation(self):
        # separation/within ratio of 10: raw concatenated modalities should be
        # classifiable by the nearest class centroid
        ds = generate_dataset(small_config(labeled_classes=2, novel_classes=2,
                                           samples_per_class=25))
        x = np.stack([np.concatenate([s.vectors[j] for j in sorted(s.vectors)])
                      for s in ds.samples])
        y = np.array([ds.hidden_classes[s.sample_id] for s in ds.samples])
        centroids = np.stack([x[y == c].mean(axis=0) for c in range(4)])
        predicted = np.argmin(((x[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
        assert (predicted == y).mean() >= 0.95

    def test_label_state_splits_class_ranges(self):
        ds = generate_dataset(small_config())
        for s in ds.samples:
            hidden = ds.hidden_classes[s.sample_id]
            if hidden < 2:
                assert s.label_kind == GROUND_TRUTH and s.label == hidden
            else:
                assert s.label_kind == UNLABELED and s.label is None

    @pytest.mark.parametrize("bad", [
        dict(labeled_classes=0, novel_classes=0),
        dict(samples_per_class=0),
        dict(modality_dims=()),
        dict(class_separation=0.0),
    ])
    def test_config_errors(self, bad):
        with pytest.raises(ConfigError):
            generate_dataset(small_config(**bad))


class TestDropModalities:
    def test_zero_probability_is_identity(self):
        ds = generate_dataset(small_config())
        assert drop_modalities(ds, 0.0, seed=3) == ds

    def test_drop_fraction_matches_probability(self):
        # 2500 samples x 4 modalities = 10000 Bernoulli draws; the keep-one
        # guard only perturbs the rate by p^m/m = 0.0064 here
        ds = generate_dataset(small_config(samples_per_class=625,
                                           modality_dims=(5, 6, 4, 3)))
        dropped = drop_modalities(ds, 0.4, seed=1)
        total = sum(len(s.vectors) for s in dropped.samples)
        missing = sum(1 for s in dropped.samples for v in s.vectors.values() if v is None)
        assert missing / total == pytest.approx(0.4, abs=0.02)

    def test_never_removes_every_modality(self):
        ds = generate_dataset(small_config(modality_dims=(4,)))
        dropped = drop_modalities(ds, 0.9, seed=5)
        assert all(s.present_modalities() for s in dropped.samples)

    def test_probability_one_rejected(self):
        ds = generate_dataset(small_config())
        with pytest.raises(ConfigError):
            drop_modalities(ds, 1.0, seed=0)


class TestMaskModality:
    def test_masks_everywhere(self):
        ds = generate_dataset(small_config())
        masked = mask_modality(ds, 1)
        assert all(s.vectors[1] is None for s in masked.samples)
        assert all(s.vectors[0] is not None for s in masked.samples)

    def test_unknown_modality(self):
        ds = generate_dataset(small_config())
        with pytest.raises(ConfigError):
            mask_modality(ds, 9)


class TestSplit:
    def test_counts(self):
        ds = generate_dataset(small_config(labeled_classes=1, novel_classes=0,
                                           samples_per_class=5))
        queries, targets = split_query_target(ds, 1)
        assert len(queries) == 1 and len(targets) == 4

    def test_partition(self):
        ds = generate_dataset(small_config())
        queries, targets = split_query_target(ds, 3)
        all_ids = {s.sample_id for s in ds.samples}
        assert set(queries) | set(targets) == all_ids
        assert not set(queries) & set(targets)

    def test_exact_per_class_count(self):
        ds = generate_dataset(small_config())
        queries, _ = split_query_target(ds, 3)
        per_class = {}
        for sid in queries:
            per_class[ds.hidden_classes[sid]] = per_class.get(ds.hidden_classes[sid], 0) + 1
        assert all(count == 3 for count in per_class.values())

    def test_class_too_small_names_class(self):
        ds = generate_dataset(small_config(samples_per_class=4))
        with pytest.raises(ConfigError, match="class 0"):
            split_query_target(ds, 4)

    def test_deterministic_per_seed(self):
        ds = generate_dataset(small_config())
        assert split_query_target(ds, 2, seed=9) == split_query_target(ds, 2, seed=9)
        assert split_query_target(ds, 2, seed=9) != split_query_target(ds, 2, seed=10)


class TestSaveLoad:
    def test_roundtrip_identity(self, tmp_path):
        ds = generate_dataset(small_config())
        path = tmp_path / "data.ds"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_roundtrip_with_missing_and_pseudo(self, tmp_path):
        ds = drop_modalities(generate_dataset(small_config()), 0.3, seed=2)
        ds.samples[25].label_kind = "pseudo"
        ds.samples[25].label = 7
        path = tmp_path / "data.ds"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_truncated_file_fails_atomically(self, tmp_path):
        ds = generate_dataset(small_config())
        path = tmp_path / "data.ds"
        save_dataset(ds, path)
        content = path.read_text().splitlines()
        path.write_text("\n".join(content[:-3]) + "\n")
        with pytest.raises(DataFormatError, match="promises"):
            load_dataset(path)

    def test_unknown_modality_id_named(self, tmp_path):
        ds = generate_dataset(small_config())
        path = tmp_path / "data.ds"
        save_dataset(ds, path)
        content = path.read_text().replace(" m1=", " m7=", 1)
        path.write_text(content)
        with pytest.raises(DataFormatError, match="modality id 7"):
            load_dataset(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "data.ds"
        path.write_text("not a dataset\n")
        with pytest.raises(DataFormatError):
            load_dataset(path)

    def test_saved_files_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.ds", tmp_path / "b.ds"
        save_dataset(generate_dataset(small_config()), a)
        save_dataset(generate_dataset(small_config()), b)
        assert a.read_bytes() == b.read_bytes()


class TestBatchIterator:
    def test_batch_sizes(self):
        ds = generate_dataset(small_config(labeled_classes=1, novel_classes=0,
                                           samples_per_class=10))
        sizes = [len(b) for b in batch_iterator(ds, 3, seed=0, epoch=0)]
        assert sizes == [3, 3, 3, 1]

    def test_same_seed_epoch_reproduces_order(self):
        ds = generate_dataset(small_config())
        first = [[s.sample_id for s in b] for b in batch_iterator(ds, 4, seed=1, epoch=2)]
        second = [[s.sample_id for s in b] for b in batch_iterator(ds, 4, seed=1, epoch=2)]
        third = [[s.sample_id for s in b] for b in batch_iterator(ds, 4, seed=1, epoch=3)]
        assert first == second
        assert first != third

    def test_each_sample_exactly_once(self):
        ds = generate_dataset(small_config())
        seen = [s.sample_id for b in batch_iterator(ds, 7, seed=0, epoch=0) for s in b]
        assert sorted(seen) == [s.sample_id for s in ds.samples]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            list(batch_iterator([], 4, seed=0, epoch=0))
