import numpy as np
import pytest

from dualmodseg import (
    Batch,
    DataError,
    DatasetSplit,
    SegMask,
    Volume,
    compose_batch,
    make_split,
)
from dualmodseg.preprocessing import PatchSpec

from conftest import make_sample, make_samples


class TestTypes:
    def test_volume_rejects_nan(self):
        bad = np.ones((4, 4, 4))
        bad[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            Volume(bad)

    def test_volume_rejects_bad_spacing(self):
        with pytest.raises(DataError):
            Volume(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))

    def test_volume_rejects_2d(self):
        with pytest.raises(DataError):
            Volume(np.zeros((4, 4)))

    def test_volume_is_immutable(self):
        v = Volume(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            v.voxels[0, 0, 0] = 1.0

    def test_mask_label_range(self):
        with pytest.raises(DataError):
            SegMask(np.full((4, 4, 4), 2), num_classes=2)

    def test_mask_one_hot_roundtrip(self):
        labels = np.random.default_rng(0).integers(0, 3, (4, 4, 4))
        mask = SegMask(labels, num_classes=3)
        oh = mask.one_hot()
        assert oh.shape == (3, 4, 4, 4)
        assert np.array_equal(np.argmax(oh, axis=0), labels)
        assert np.allclose(oh.sum(axis=0), 1.0)

    def test_sample_shape_mismatch(self):
        with pytest.raises(DataError):
            s = make_sample()
            type(s)(id="x", vol_a=s.vol_a, vol_b=Volume(np.zeros((4, 4, 4))), mask=None)

    def test_split_rejects_duplicate_ids(self):
        s = make_sample("dup")
        with pytest.raises(DataError):
            DatasetSplit(labeled=(s,), val=(s,))

    def test_split_rejects_unmasked_labeled(self):
        s = make_sample("u", labeled=False)
        with pytest.raises(DataError):
            DatasetSplit(labeled=(s,))

    def test_batch_rejects_mixed_shapes(self):
        a = make_sample("a", shape=(8, 8, 8))
        b = make_sample("b", shape=(4, 4, 4))
        with pytest.raises(DataError):
            Batch(labeled_samples=(a, b))


class TestMakeSplit:
    def test_paper_pool_fraction(self):
        # 250-case train pool at 5% labeled
        split = make_split(make_samples(250), 0.05, seed=1)
        assert len(split.labeled) == 12
        assert len(split.unlabeled) == 238

    def test_full_fraction_identity(self):
        split = make_split(make_samples(100), 1.0, seed=0)
        assert len(split.labeled) == 100
        assert len(split.unlabeled) == 0

    def test_minimum_clamp(self):
        split = make_split(make_samples(10), 0.05, seed=0)
        assert len(split.labeled) == 1
        assert len(split.unlabeled) == 9

    def test_deterministic_per_seed(self):
        samples = make_samples(30)
        s1 = make_split(samples, 0.2, seed=7, val_count=3, test_count=5)
        s2 = make_split(samples, 0.2, seed=7, val_count=3, test_count=5)
        for part in ("labeled", "unlabeled", "val", "test"):
            assert [s.id for s in getattr(s1, part)] == [s.id for s in getattr(s2, part)]

    def test_partition_covers_input(self):
        samples = make_samples(30)
        split = make_split(samples, 0.2, seed=3, val_count=4, test_count=6)
        ids = [s.id for part in (split.labeled, split.unlabeled, split.val, split.test)
               for s in part]
        assert sorted(ids) == sorted(s.id for s in samples)
        assert len(set(ids)) == len(ids)

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            make_split([], 0.5, seed=0)

    def test_rejects_bad_fraction(self):
        samples = make_samples(5)
        for frac in (0.0, -0.1, 1.5):
            with pytest.raises(DataError):
                make_split(samples, frac, seed=0)


class TestComposeBatch:
    def _split(self):
        return make_split(make_samples(12, shape=(8, 8, 8)), 0.5, seed=0)

    def test_counts(self):
        batch = compose_batch(self._split(), 4, 2, np.random.default_rng(0))
        assert len(batch.labeled_samples) == 2
        assert len(batch.unlabeled_samples) == 2

    def test_fully_supervised_batch(self):
        batch = compose_batch(self._split(), 4, 4, np.random.default_rng(0))
        assert len(batch.labeled_samples) == 4
        assert len(batch.unlabeled_samples) == 0

    def test_deterministic_given_rng(self):
        split = self._split()
        ids1 = [s.id for s in compose_batch(split, 4, 2, np.random.default_rng(5)).labeled_samples]
        ids2 = [s.id for s in compose_batch(split, 4, 2, np.random.default_rng(5)).labeled_samples]
        assert ids1 == ids2

    def test_mask_withholding(self):
        batch = compose_batch(self._split(), 4, 2, np.random.default_rng(0))
        assert all(s.mask is not None for s in batch.labeled_samples)
        assert all(s.mask is None for s in batch.unlabeled_samples)

    def test_patching(self):
        patch = PatchSpec((4, 4, 4))
        batch = compose_batch(self._split(), 4, 2, np.random.default_rng(0), patch=patch)
        assert batch.patch_shape == (4, 4, 4)

    def test_empty_labeled_pool_errors(self):
        split = DatasetSplit(labeled=(make_sample("l"),), unlabeled=())
        empty = DatasetSplit(labeled=(), unlabeled=(make_sample("u", labeled=False),))
        with pytest.raises(DataError):
            compose_batch(empty, 2, 1, np.random.default_rng(0))
        with pytest.raises(DataError):
            compose_batch(split, 0, 0, np.random.default_rng(0))
