import numpy as np
import pytest

from dualmodseg import asd, dice_score, evaluate_dataset, extract_surface
from dualmodseg.metrics import EmptySurfaceError, MetricsReport
from dualmodseg.network import ShapeError


# ---------------------------------------------------------------------------
# brute-force oracles

def dice_oracle(pred, gt, class_id):
    p_count = g_count = inter = 0
    for idx in np.ndindex(pred.shape):
        p = pred[idx] == class_id
        g = gt[idx] == class_id
        p_count += p
        g_count += g
        inter += p and g
    if p_count + g_count == 0:
        return 1.0
    return 2.0 * inter / (p_count + g_count)


def surface_oracle(mask, class_id):
    coords = []
    shape = mask.shape
    for idx in np.ndindex(shape):
        if mask[idx] != class_id:
            continue
        exposed = False
        for ax in range(3):
            for d in (-1, 1):
                n = list(idx)
                n[ax] += d
                if not (0 <= n[ax] < shape[ax]) or mask[tuple(n)] != class_id:
                    exposed = True
        if exposed:
            coords.append(idx)
    return set(coords)


def asd_oracle(pred, gt, class_id, spacing):
    sp = np.asarray(spacing, dtype=float)
    s_p = [np.array(c) * sp for c in sorted(surface_oracle(pred, class_id))]
    s_g = [np.array(c) * sp for c in sorted(surface_oracle(gt, class_id))]
    total = 0.0
    for p in s_p:
        total += min(np.linalg.norm(p - g) for g in s_g)
    for g in s_g:
        total += min(np.linalg.norm(g - p) for p in s_p)
    return total / (len(s_p) + len(s_g))


def random_mask(rng, shape=(5, 5, 5), p=0.3, nonempty=True):
    while True:
        m = (rng.random(shape) < p).astype(np.int64)
        if not nonempty or m.sum() > 0:
            return m


class TestDiceScore:
    def test_identity(self):
        m = random_mask(np.random.default_rng(0))
        assert dice_score(m, m.copy(), 1) == 1.0

    def test_disjoint(self):
        p = np.zeros((4, 4, 4), dtype=np.int64)
        g = np.zeros((4, 4, 4), dtype=np.int64)
        p[0, 0, 0] = 1
        g[3, 3, 3] = 1
        assert dice_score(p, g, 1) == 0.0

    def test_counting_example(self):
        p = np.zeros((4, 4, 4), dtype=np.int64)
        g = np.zeros((4, 4, 4), dtype=np.int64)
        p[0, 0, :2] = 1          # |P| = 2
        g[0, 0, :4] = 1          # |G| = 4, overlap 2
        assert dice_score(p, g, 1) == pytest.approx(2 * 2 / 6)

    def test_both_empty(self):
        z = np.zeros((3, 3, 3), dtype=np.int64)
        assert dice_score(z, z, 1) == 1.0

    def test_symmetry_and_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p, g = random_mask(rng), random_mask(rng)
            assert dice_score(p, g, 1) == dice_score(g, p, 1)
            assert dice_score(p, g, 1) == pytest.approx(dice_oracle(p, g, 1), abs=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_score(np.zeros((2, 2, 2), dtype=int), np.zeros((3, 3, 3), dtype=int), 1)


class TestExtractSurface:
    def test_isolated_voxel(self):
        m = np.zeros((5, 5, 5), dtype=np.int64)
        m[2, 2, 2] = 1
        assert [tuple(c) for c in extract_surface(m, 1)] == [(2, 2, 2)]

    def test_solid_cube(self):
        m = np.zeros((5, 5, 5), dtype=np.int64)
        m[1:4, 1:4, 1:4] = 1
        surf = extract_surface(m, 1)
        assert len(surf) == 26  # all cube voxels except the center

    def test_empty(self):
        assert len(extract_surface(np.zeros((3, 3, 3), dtype=np.int64), 1)) == 0

    def test_boundary_counts_as_outside(self):
        m = np.ones((2, 2, 2), dtype=np.int64)
        assert len(extract_surface(m, 1)) == 8

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            m = random_mask(rng, shape=(4, 4, 4), nonempty=False)
            got = {tuple(c) for c in extract_surface(m, 1)}
            assert got == surface_oracle(m, 1)


class TestAsd:
    def test_identity(self):
        m = random_mask(np.random.default_rng(3))
        assert asd(m, m.copy(), 1) == 0.0

    def test_two_points_three_apart(self):
        p = np.zeros((8, 8, 8), dtype=np.int64)
        g = np.zeros((8, 8, 8), dtype=np.int64)
        p[1, 1, 1] = 1
        g[4, 1, 1] = 1
        assert asd(p, g, 1, (1.0, 1.0, 1.0)) == pytest.approx(3.0)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p, g = random_mask(rng), random_mask(rng)
            assert asd(p, g, 1) == pytest.approx(asd(g, p, 1), abs=1e-12)

    def test_spacing_scaling(self):
        rng = np.random.default_rng(5)
        p, g = random_mask(rng), random_mask(rng)
        base = asd(p, g, 1, (1.0, 1.0, 1.0))
        assert asd(p, g, 1, (2.5, 2.5, 2.5)) == pytest.approx(2.5 * base, rel=1e-12)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            p = random_mask(rng, shape=(6, 6, 6))
            g = random_mask(rng, shape=(6, 6, 6))
            spacing = tuple(rng.uniform(0.5, 3.0, 3))
            assert asd(p, g, 1, spacing) == pytest.approx(
                asd_oracle(p, g, 1, spacing), abs=1e-9
            )

    def test_empty_surface_errors(self):
        z = np.zeros((3, 3, 3), dtype=np.int64)
        m = random_mask(np.random.default_rng(7), shape=(3, 3, 3))
        with pytest.raises(EmptySurfaceError):
            asd(z, m, 1)


class TestEvaluateDataset:
    def test_all_perfect(self):
        rng = np.random.default_rng(8)
        masks = [random_mask(rng) for _ in range(4)]
        report = evaluate_dataset(masks, [m.copy() for m in masks], [(1, 1, 1)] * 4)
        assert report.dsc_mean == 1.0 and report.dsc_std == 0.0
        assert report.asd_mean == 0.0 and report.asd_std == 0.0

    def test_population_std(self):
        report = MetricsReport.from_samples([("a", 0.8, 1.0), ("b", 0.6, 3.0)])
        assert report.dsc_mean == pytest.approx(0.7)
        assert report.dsc_std == pytest.approx(0.1)
        assert report.asd_mean == pytest.approx(2.0)

    def test_empty_surface_excluded_with_warning(self):
        rng = np.random.default_rng(9)
        good = random_mask(rng)
        empty = np.zeros((5, 5, 5), dtype=np.int64)
        report = evaluate_dataset(
            [good, empty], [good.copy(), good.copy()], [(1, 1, 1)] * 2, ids=["g", "e"]
        )
        assert report.asd_excluded == 1
        assert report.per_sample[1][2] is None
        assert report.asd_mean == pytest.approx(0.0)

    def test_misaligned_ids_error(self):
        m = random_mask(np.random.default_rng(10))
        with pytest.raises(ValueError):
            evaluate_dataset([m], [m, m], [(1, 1, 1)] * 2)

    def test_csv_output(self):
        report = MetricsReport.from_samples([("a", 0.5, 1.25), ("b", 1.0, None)])
        csv_text = report.to_csv()
        assert "id,dsc,asd_mm" in csv_text
        assert "a,0.500000,1.250000" in csv_text
        assert "b,1.000000," in csv_text
        assert "asd_excluded=1" in csv_text
