import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octfpn import data as D


def records_for(patients, per_patient=1, label=0):
    return [D.ManifestRecord(f"images/{p}_{j}.png", p, "OD", label) for p in patients for j in range(per_patient)]


class TestManifest:
    def test_round_trip(self, tmp_path):
        recs = [D.ManifestRecord("a.png", "p1", "OD", 0), D.ManifestRecord("b.png", "p2", "unknown", 2)]
        D.write_manifest(tmp_path / "m.csv", recs)
        assert D.read_manifest(tmp_path / "m.csv") == recs

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("file,patient,eye,label\na.png,p,OD,0\n")
        with pytest.raises(ValueError, match="header"):
            D.read_manifest(tmp_path / "m.csv")

    def test_bad_eye(self):
        with pytest.raises(ValueError):
            D.ManifestRecord("a.png", "p", "left", 0)

    def test_label_range(self, tmp_path):
        D.write_manifest(tmp_path / "m.csv", [D.ManifestRecord("a.png", "p", "OD", 3)])
        with pytest.raises(ValueError):
            D.read_manifest(tmp_path / "m.csv", n_classes=3)


class TestPreprocess:
    def test_constant_image_standardizes_to_zero(self):
        assert not D.standardize(np.full((8, 8), 0.4)).any()

    def test_moments(self):
        img = np.random.default_rng(0).uniform(size=(40, 30))
        out = D.standardize(img)
        assert abs(out.mean()) < 1e-5
        assert abs(out.std() - 1) < 1e-4

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
    def test_idempotent(self, seed, scale):
        img = scale * np.random.default_rng(seed).uniform(size=(12, 9))
        once = D.standardize(img)
        assert np.abs(D.standardize(once) - once).max() <= 1e-5

    def test_resize_shape(self):
        out = D.preprocess(np.random.default_rng(1).uniform(size=(496, 512)), 224)
        assert out.shape == (224, 224, 1)

    def test_resize_constant_preserved(self):
        np.testing.assert_allclose(D.resize_bilinear(np.full((10, 7), 0.3), 16), 0.3)

    def test_png16_round_trip(self, tmp_path):
        img = np.random.default_rng(2).uniform(size=(9, 11))
        D.save_png16(tmp_path / "x.png", img)
        np.testing.assert_allclose(D.load_image(tmp_path / "x.png"), img, atol=1 / 65535)


class TestAugmentation:
    def test_identity(self):
        img = np.random.default_rng(0).normal(size=(16, 16, 1))
        cfg = D.AugmentationConfig.none()
        out = D.augment(img, cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(out, img)

    def test_brightness_only(self):
        img = np.random.default_rng(0).normal(size=(16, 16, 1))
        out = D.apply_augmentation(img, D.AugmentDraw(0.0, 0.0, 1.2, 1.0, False))
        np.testing.assert_allclose(out, img * 1.2)

    def test_flip_is_involution(self):
        img = np.random.default_rng(0).normal(size=(16, 16, 1))
        draw = D.AugmentDraw(0.0, 0.0, 1.0, 1.0, True)
        once = D.apply_augmentation(img, draw)
        np.testing.assert_array_equal(once, img[:, ::-1])
        np.testing.assert_array_equal(D.apply_augmentation(once, draw), img)

    def test_draws_within_ranges(self):
        cfg = D.AugmentationConfig()
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = D.sample_augmentation(cfg, rng)
            assert abs(d.rotation) <= 15 and abs(d.shear) <= 5
            assert 0.8 <= d.brightness <= 1.2 and 0.8 <= d.zoom <= 1.2

    def test_rotation_keeps_shape(self):
        img = np.random.default_rng(0).normal(size=(16, 16, 1))
        assert D.apply_augmentation(img, D.AugmentDraw(10.0, 3.0, 1.0, 1.1, False)).shape == img.shape

    def test_negative_range_rejected(self):
        with pytest.raises(ValueError):
            D.AugmentationConfig(rotation=-1)


class TestClassWeights:
    def test_neh_table(self):
        assert D.compute_class_weights([3240, 3742, 5667]).display() == (0.26, 0.29, 0.45)

    def test_ucsd_table(self):
        assert D.compute_class_weights([37206, 11349, 8617, 51140]).display() == (0.34, 0.11, 0.08, 0.47)

    def test_plain_rounding_would_not_match(self):
        # documents why display() apportions: naive rounding gives 0.30 / 0.10
        w = D.compute_class_weights([3240, 3742, 5667]).weights
        assert round(w[1], 2) == 0.30
        w = D.compute_class_weights([37206, 11349, 8617, 51140]).weights
        assert round(w[1], 2) == 0.10

    @pytest.mark.parametrize("scheme", D.WEIGHT_SCHEMES)
    def test_equal_counts(self, scheme):
        np.testing.assert_allclose(D.compute_class_weights([10, 10, 10], scheme).weights, 1 / 3)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            D.compute_class_weights([5, 0, 3])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 100_000), min_size=2, max_size=6))
    def test_display_sums_to_one(self, counts):
        shown = D.compute_class_weights(counts).display()
        assert sum(round(v * 100) for v in shown) == 100
        exact = np.asarray(counts) / sum(counts)
        assert np.all(np.abs(np.asarray(shown) - exact) < 0.01 + 1e-12)


class TestFolds:
    def test_ten_patients(self):
        plan = D.patient_kfold(records_for([f"p{i}" for i in range(10)]), k=5, seed=0)
        assert plan.fold_sizes() == [2] * 5

    def test_441_patients(self):
        plan = D.patient_kfold(records_for([f"p{i:03d}" for i in range(441)]), k=5, seed=0)
        assert sorted(plan.fold_sizes(), reverse=True) == [89, 88, 88, 88, 88]
        assert set(plan.assignment) == {f"p{i:03d}" for i in range(441)}

    def test_patient_records_share_fold(self):
        recs = records_for([f"p{i}" for i in range(12)], per_patient=1) + records_for(["big"], per_patient=40)
        plan = D.patient_kfold(recs, k=5, seed=3)
        for fold in range(5):
            train, val, test = plan.split_records(recs, fold)
            ids = [{r.patient_id for r in s} for s in (train, val, test)]
            assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
            assert len(train) + len(val) + len(test) == len(recs)
        big_tests = [f for f in range(5) if any(r.patient_id == "big" for r in plan.split_records(recs, f)[2])]
        assert len(big_tests) == 1

    def test_validation_fraction(self):
        plan = D.patient_kfold(records_for([f"p{i}" for i in range(50)]), k=5, seed=0)
        for fold in range(5):
            train, val, test = plan.split(fold)
            assert len(val) == math.ceil(0.2 * 40)
            assert len(train) == 32

    def test_seed_changes_assignment(self):
        recs = records_for([f"p{i}" for i in range(30)])
        assert D.patient_kfold(recs, 5, 0).assignment != D.patient_kfold(recs, 5, 1).assignment

    def test_too_few_patients(self):
        with pytest.raises(ValueError):
            D.patient_kfold(records_for(["a", "b"]), k=5)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(5, 200), k=st.integers(2, 5), seed=st.integers(0, 1000))
    def test_balanced_partition(self, n, k, seed):
        plan = D.patient_kfold(records_for([f"p{i}" for i in range(n)]), k=k, seed=seed)
        sizes = plan.fold_sizes()
        assert sum(sizes) == n and max(sizes) - min(sizes) <= 1


class TestSynthetic:
    def test_deterministic(self):
        a = D.synth_generate(6, 32, seed=4)
        b = D.synth_generate(6, 32, seed=4)
        assert a.records == b.records
        assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))

    def test_counts_and_patients(self):
        ds = D.synth_generate(10, 64, seed=0)
        assert Counter(r.label for r in ds.records) == {0: 10, 1: 10, 2: 10}
        per_patient = Counter(r.patient_id for r in ds.records)
        assert all(3 <= v <= 8 for v in per_patient.values())
        for pid in per_patient:
            assert len({r.label for r in ds.records if r.patient_id == pid}) == 1

    def test_masks(self):
        ds = D.synth_generate(12, 64, seed=1)
        for r, m, img in zip(ds.records, ds.masks, ds.images):
            assert img.shape == (64, 64) and m.shape == (64, 64)
            assert 0.0 <= img.min() and img.max() <= 1.0
            if r.label == 0:
                assert not m.any()
            else:
                assert m.any()

    def test_small_blob_diameter(self):
        for d in range(2, 5):
            stamp = D.disk_stamp(d)
            assert stamp.shape == (d, d) and stamp.any()
        style = D.SynthStyle()
        lo, hi = (round(64 * f) for f in style.small_span)
        assert (lo, hi) == (2, 4)

    def test_large_lesion_is_bigger(self):
        ds = D.synth_generate(10, 64, seed=2)
        small = [m.sum() for r, m in zip(ds.records, ds.masks) if r.label == 1]
        large = [m.sum() for r, m in zip(ds.records, ds.masks) if r.label == 2]
        assert max(small) < min(large)

    def test_write_and_reload(self, tmp_path):
        ds = D.synth_generate(4, 32, seed=0)
        D.write_synth(tmp_path, ds)
        records, images = D.load_dataset(tmp_path / "manifest.csv", 32, 3)
        assert records == ds.records
        assert images.shape == (12, 32, 32, 1)
        masks = D.load_masks(tmp_path / "manifest.csv", records)
        assert all(np.array_equal(a, b) for a, b in zip(masks, ds.masks))
