import numpy as np
import pytest

from dualmodseg import DataError, SynthSpec, generate_dataset, generate_sample
from dualmodseg.synthetic import ellipsoid_mask


class TestEllipsoid:
    def test_centered_sphere_matches_exhaustive_count(self):
        # oracle: exhaustive voxel-membership test against the inequality
        shape, center, semi = (16, 16, 16), (8.0, 8.0, 8.0), (4.0, 4.0, 4.0)
        expected = np.zeros(shape, dtype=bool)
        for z in range(16):
            for y in range(16):
                for x in range(16):
                    r = ((z - 8) / 4) ** 2 + ((y - 8) / 4) ** 2 + ((x - 8) / 4) ** 2
                    expected[z, y, x] = r <= 1.0
        got = ellipsoid_mask(shape, center, semi)
        assert np.array_equal(got, expected)
        # continuous sphere volume is ~268/4096; the discrete count is close to
        # the nominal 256/4096 figure
        assert abs(got.sum() / 4096 - 256 / 4096) < 0.02


class TestGenerateSample:
    def test_noiseless_two_values(self):
        spec = SynthSpec(noise_sigma=0.0, contrast_a=0.6, seed=3)
        s = generate_sample(spec)
        assert set(np.unique(s.vol_a.voxels)) == {np.float32(0.2), np.float32(0.8)}

    def test_threshold_recovers_mask(self):
        spec = SynthSpec(noise_sigma=0.0, seed=11)
        s = generate_sample(spec)
        recovered = (s.vol_a.voxels > 0.5).astype(np.int64)
        assert np.array_equal(recovered, s.mask.labels)

    def test_deterministic(self):
        s1 = generate_sample(SynthSpec(seed=5))
        s2 = generate_sample(SynthSpec(seed=5))
        assert np.array_equal(s1.vol_a.voxels, s2.vol_a.voxels)
        assert np.array_equal(s1.vol_b.voxels, s2.vol_b.voxels)
        assert np.array_equal(s1.mask.labels, s2.mask.labels)

    def test_intensities_in_unit_range(self):
        for seed in range(5):
            s = generate_sample(SynthSpec(noise_sigma=0.5, seed=seed))
            for vox in (s.vol_a.voxels, s.vol_b.voxels):
                assert vox.min() >= 0.0 and vox.max() <= 1.0

    def test_complementary_contrast(self):
        for seed in range(5):
            s = generate_sample(SynthSpec(noise_sigma=0.1, seed=seed))
            fg = s.mask.labels.astype(bool)
            diff_a = s.vol_a.voxels[fg].mean() - s.vol_a.voxels[~fg].mean()
            diff_b = s.vol_b.voxels[fg].mean() - s.vol_b.voxels[~fg].mean()
            assert diff_a > 0 > diff_b

    def test_invalid_shape(self):
        with pytest.raises(DataError):
            SynthSpec(shape=(10, 16, 16))


class TestGenerateDataset:
    def test_single(self):
        out = generate_dataset(1, 7, SynthSpec())
        assert len(out) == 1 and out[0].id == "synth-7"

    def test_disjoint_seed_ranges(self):
        a = generate_dataset(3, 0, SynthSpec())
        b = generate_dataset(3, 100, SynthSpec())
        assert {s.id for s in a}.isdisjoint({s.id for s in b})

    def test_masks_distinct(self):
        out = generate_dataset(24, 7, SynthSpec())
        flat = {s.mask.labels.tobytes() for s in out}
        assert len(flat) == 24
