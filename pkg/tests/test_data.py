import numpy as np
import pytest

from adverseg.data import (AugmentConfig, IngestionError, LABELED, UNLABELED,
                           Sample, augment, dataset_fingerprint,
                           generate_shapes_dataset, interleave_batches,
                           load_folder_dataset, save_folder_dataset,
                           split_labeled)
from adverseg.maps import IGNORE


class TestGenerateShapes:
    def test_empty(self):
        assert generate_shapes_dataset(0, 64, 64, 4, seed=1) == []

    def test_deterministic(self):
        a = generate_shapes_dataset(4, 64, 64, 4, seed=7)
        b = generate_shapes_dataset(4, 64, 64, 4, seed=7)
        for s, t in zip(a, b):
            assert s.id == t.id
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.label, t.label)

    def test_different_seeds_differ(self):
        a = generate_shapes_dataset(2, 64, 64, 4, seed=1)
        b = generate_shapes_dataset(2, 64, 64, 4, seed=2)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_labels_in_range_and_background_floor(self):
        # 100-sample sweep: every label < C and class 0 keeps >= 30% of
        # pixels (guaranteed by the generator's shape-area cap).
        samples = generate_shapes_dataset(100, 64, 64, 4, seed=11)
        for s in samples:
            assert s.label.max() < 4
            assert s.label.min() >= 0
            assert (s.label == 0).mean() >= 0.30

    def test_image_range(self):
        for s in generate_shapes_dataset(5, 48, 32, 3, seed=3):
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.image.shape == (48, 32, 3)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            generate_shapes_dataset(1, 64, 64, 1, seed=0)


class TestFolderRoundTrip:
    def test_save_load_roundtrip(self, tmp_path):
        samples = generate_shapes_dataset(3, 32, 32, 4, seed=5)
        save_folder_dataset(samples, tmp_path)
        loaded = load_folder_dataset(tmp_path)
        assert [s.id for s in loaded] == [s.id for s in samples]
        for orig, back in zip(samples, loaded):
            np.testing.assert_array_equal(orig.image, back.image)
            np.testing.assert_array_equal(orig.label, back.label)

    def test_unlabeled_samples(self, tmp_path):
        samples = generate_shapes_dataset(2, 32, 32, 4, seed=5)
        samples[1] = Sample(id=samples[1].id, image=samples[1].image, label=None)
        save_folder_dataset(samples, tmp_path)
        loaded = load_folder_dataset(tmp_path)
        assert loaded[0].label is not None
        assert loaded[1].label is None

    def test_size_mismatch_names_stem(self, tmp_path):
        from PIL import Image
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        Image.new("RGB", (8, 8)).save(tmp_path / "images" / "bad.png")
        Image.new("L", (4, 4)).save(tmp_path / "labels" / "bad.png")
        with pytest.raises(IngestionError, match="bad"):
            load_folder_dataset(tmp_path)

    def test_missing_folder(self, tmp_path):
        with pytest.raises(IngestionError):
            load_folder_dataset(tmp_path / "nope")

    def test_fingerprint_stable(self):
        a = generate_shapes_dataset(3, 32, 32, 4, seed=5)
        b = generate_shapes_dataset(3, 32, 32, 4, seed=5)
        assert dataset_fingerprint(a) == dataset_fingerprint(b)


class TestSplitLabeled:
    def test_floor_rule(self):
        ds = generate_shapes_dataset(16, 32, 32, 3, seed=0)
        split = split_labeled(ds, 1 / 8, seed=4)
        assert len(split.labeled_ids) == 2
        assert len(split.unlabeled_ids) == 14

    def test_minimum_one_labeled(self):
        ds = generate_shapes_dataset(10, 32, 32, 3, seed=0)
        split = split_labeled(ds, 1 / 8, seed=4)
        assert len(split.labeled_ids) == 1
        assert len(split.unlabeled_ids) == 9

    def test_full_fraction(self):
        ds = generate_shapes_dataset(5, 32, 32, 3, seed=0)
        split = split_labeled(ds, 1.0, seed=4)
        assert len(split.labeled_ids) == 5
        assert split.unlabeled_ids == ()

    def test_partition(self):
        ds = generate_shapes_dataset(9, 32, 32, 3, seed=0)
        split = split_labeled(ds, 0.5, seed=1)
        all_ids = set(split.labeled_ids) | set(split.unlabeled_ids)
        assert all_ids == {s.id for s in ds}
        assert not set(split.labeled_ids) & set(split.unlabeled_ids)

    def test_deterministic_per_seed(self):
        ds = generate_shapes_dataset(12, 32, 32, 3, seed=0)
        assert split_labeled(ds, 0.25, seed=9) == split_labeled(ds, 0.25, seed=9)
        assert (split_labeled(ds, 0.25, seed=9).labeled_ids
                != split_labeled(ds, 0.25, seed=10).labeled_ids)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            split_labeled([], 0.5, seed=0)

    def test_bad_fraction(self):
        ds = generate_shapes_dataset(2, 32, 32, 3, seed=0)
        with pytest.raises(ValueError):
            split_labeled(ds, 0.0, seed=0)
        with pytest.raises(ValueError):
            split_labeled(ds, 1.5, seed=0)


class TestAugment:
    def _sample(self, h=10, w=10):
        rng = np.random.default_rng(0)
        image = rng.random((h, w, 3)).astype(np.float32)
        label = rng.integers(0, 3, size=(h, w))
        return Sample(id="s", image=image, label=label)

    def test_identity_when_scale_off_and_crop_matches(self):
        s = self._sample(10, 10)
        cfg = AugmentConfig(crop_h=10, crop_w=10, enable_scale=False)
        out = augment(s, cfg, seed=3)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.label, s.label)

    def test_padding_uses_ignore(self):
        s = self._sample(10, 10)
        cfg = AugmentConfig(crop_h=20, crop_w=20, enable_scale=False)
        out = augment(s, cfg, seed=3)
        assert out.image.shape == (20, 20, 3)
        assert out.label.shape == (20, 20)
        assert (out.label[10:, :] == IGNORE).all()
        assert (out.label[:, 10:] == IGNORE).all()
        assert (out.image[10:, :, :] == 0).all()

    def test_deterministic(self):
        s = self._sample(12, 12)
        cfg = AugmentConfig(crop_h=8, crop_w=8, scale_min=0.5, scale_max=1.5)
        a = augment(s, cfg, seed=42)
        b = augment(s, cfg, seed=42)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.label, b.label)

    def test_label_values_preserved(self):
        # Augmented labels contain only source values plus IGNORE.
        s = self._sample(12, 12)
        cfg = AugmentConfig(crop_h=16, crop_w=16, scale_min=0.5, scale_max=1.5)
        for seed in range(10):
            out = augment(s, cfg, seed=seed)
            assert set(np.unique(out.label)) <= set(np.unique(s.label)) | {IGNORE}

    def test_unlabeled_sample(self):
        s = Sample(id="u", image=np.zeros((8, 8, 3), dtype=np.float32))
        cfg = AugmentConfig(crop_h=4, crop_w=4)
        assert augment(s, cfg, seed=0).label is None


class TestInterleave:
    def _split(self, n, fraction, seed=0):
        ds = generate_shapes_dataset(n, 32, 32, 3, seed=1)
        return ds, split_labeled(ds, fraction, seed=seed)

    def test_alternation(self):
        _, split = self._split(8, 0.5)
        stream = interleave_batches(split, batch_size=2, seed=3)
        tags = [next(stream).tag for _ in range(6)]
        assert tags == [LABELED, UNLABELED] * 3

    def test_labeled_only_when_no_unlabeled(self):
        _, split = self._split(4, 1.0)
        stream = interleave_batches(split, batch_size=2, seed=3)
        assert all(next(stream).tag == LABELED for _ in range(5))

    def test_deterministic(self):
        _, split = self._split(8, 0.5)
        a = interleave_batches(split, batch_size=2, seed=3)
        b = interleave_batches(split, batch_size=2, seed=3)
        for _ in range(10):
            x, y = next(a), next(b)
            assert x.tag == y.tag and x.sample_ids == y.sample_ids

    def test_batches_homogeneous(self):
        _, split = self._split(8, 0.5)
        stream = interleave_batches(split, batch_size=3, seed=5)
        for _ in range(8):
            batch = next(stream)
            pool = (set(split.labeled_ids) if batch.tag == LABELED
                    else set(split.unlabeled_ids))
            assert set(batch.sample_ids) <= pool

    def test_each_epoch_is_a_permutation(self):
        _, split = self._split(6, 0.5)  # 3 labeled ids
        stream = interleave_batches(split, batch_size=3, seed=5)
        labeled_batches = [b for b in (next(stream) for _ in range(8))
                           if b.tag == LABELED]
        for batch in labeled_batches:
            assert sorted(batch.sample_ids) == sorted(split.labeled_ids)

    def test_empty_pools_rejected(self):
        from adverseg.data import DatasetSplit
        split = DatasetSplit(labeled_ids=(), unlabeled_ids=(), fraction=1.0, seed=0)
        with pytest.raises(ValueError):
            next(interleave_batches(split, 2, 0))
