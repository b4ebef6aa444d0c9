"""Datagen pipeline: candidate construction, hull membership vs 2-D oracle, labeling."""

import math

import numpy as np
import pytest

from tiltalloc.datagen import (
    DatagenConfig,
    Dataset,
    DegenerateRegion,
    EmptyDataset,
    HullRegion,
    build_candidate_points,
    generate_dataset,
    hull_membership,
    label_dataset,
    load_dataset,
    sample_region,
    save_dataset,
)
from tiltalloc.vehicle import InputBounds, VehicleParams, reduced_g

P = VehicleParams()
BOUNDS = InputBounds.default(P)


def convex_hull_2d(points):
    """Brute-force oracle: Andrew monotone chain, returns CCW hull vertices."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def inside_polygon(hull, q, tol=1e-12):
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        cross = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
        if cross < -tol * max(1.0, abs(cross)):
            return False
    return True


class TestCandidates:
    def test_count(self):
        cfg = DatagenConfig(theta_range=(-0.5, 0.5), n_x=2, n_s=0)
        pts = build_candidate_points(cfg, BOUNDS, P)
        assert pts.shape == (2 * 32, 4)

    def test_thetas_on_grid(self):
        cfg = DatagenConfig(theta_range=(-0.5, 0.5), n_x=5, n_s=0)
        pts = build_candidate_points(cfg, BOUNDS, P)
        grid = np.linspace(-0.5, 0.5, 5)
        assert set(np.round(pts[:, 0], 12)).issubset(set(np.round(grid, 12)))

    def test_vertex_images(self):
        # every candidate mu is the image of an actual box vertex
        cfg = DatagenConfig(theta_range=(0.0, 0.3), n_x=2, n_s=0)
        pts = build_candidate_points(cfg, BOUNDS, P)
        # all-upper-thrust, both tilts at the lower bound, theta = 0
        v = np.array([BOUNDS.upper[0], BOUNDS.upper[1], BOUNDS.upper[2], BOUNDS.lower[3], BOUNDS.lower[4]])
        expected = np.concatenate([[0.0], reduced_g(0.0, v, P)])
        assert any(np.allclose(row, expected, atol=1e-12) for row in pts)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DatagenConfig(n_x=1)
        with pytest.raises(ValueError):
            DatagenConfig(theta_range=(0.5, -0.5))


class TestMembership:
    def region(self):
        cfg = DatagenConfig(theta_range=(-0.6, 0.6), n_x=3, n_s=0)
        return HullRegion(build_candidate_points(cfg, BOUNDS, P))

    def test_centroid_inside(self):
        region = self.region()
        inside, lam = hull_membership(region, region.generators.mean(axis=0))
        assert inside
        np.testing.assert_allclose(lam @ region.generators, region.generators.mean(axis=0), atol=1e-7)

    def test_generators_inside(self):
        region = self.region()
        for idx in (0, 17, len(region.generators) - 1):
            inside, lam = hull_membership(region, region.generators[idx])
            assert inside and lam is not None

    def test_far_point_outside(self):
        region = self.region()
        inside, lam = hull_membership(region, np.array([0.0, 0.0, 100.0, 0.0]))
        assert not inside and lam is None

    def test_degenerate_region_raises(self):
        flat = np.zeros((6, 4))
        flat[:, 0] = np.linspace(0, 1, 6)  # rank-1 generators in 4-D
        with pytest.raises(DegenerateRegion):
            hull_membership(HullRegion(flat), np.zeros(4))

    def test_matches_2d_brute_force(self):
        rng = np.random.default_rng(1234)
        checked = 0
        for _ in range(200):
            gens = rng.normal(scale=2.0, size=(rng.integers(6, 16), 2))
            region = HullRegion(gens)
            hull = convex_hull_2d(gens)
            queries = rng.normal(scale=2.5, size=(5, 2))
            for q in queries:
                expected = inside_polygon(hull, q)
                got, _ = hull_membership(region, q)
                assert got == expected, f"gens={gens!r} q={q!r}"
                checked += 1
        assert checked == 1000


class TestSampling:
    def region(self):
        cfg = DatagenConfig(theta_range=(-0.6, 0.6), n_x=3, n_s=0)
        return HullRegion(build_candidate_points(cfg, BOUNDS, P))

    def test_empty(self):
        assert sample_region(self.region(), 0, rng_seed=0).shape == (0, 4)

    def test_samples_are_members(self):
        region = self.region()
        pts = sample_region(region, 25, rng_seed=7)
        for p in pts:
            inside, _ = hull_membership(region, p)
            assert inside

    def test_deterministic(self):
        region = self.region()
        a = sample_region(region, 50, rng_seed=3)
        b = sample_region(region, 50, rng_seed=3)
        assert np.array_equal(a, b)


class TestLabeling:
    def constructive_points(self, n, seed=0):
        rng = np.random.default_rng(seed)
        pts = np.empty((n, 4))
        for i in range(n):
            theta = rng.uniform(-0.6, 0.6)
            u = rng.uniform(BOUNDS.lower, BOUNDS.upper)
            pts[i, 0] = theta
            pts[i, 1:] = reduced_g(theta, u, P)
        return pts

    def test_constructive_points_all_accepted(self):
        cfg = DatagenConfig(n_x=2, n_s=0, n_starts=2, rng_seed=5)
        ds = label_dataset(self.constructive_points(40), cfg, BOUNDS, P)
        assert len(ds) == 40
        assert ds.provenance["acceptance_rate"] == 1.0

    def test_unattainable_point_rejected(self):
        cfg = DatagenConfig(n_x=2, n_s=0, n_starts=2, rng_seed=5)
        pts = np.vstack([self.constructive_points(5), [[0.0, 0.0, 4.0 * P.g, 0.0]]])
        ds = label_dataset(pts, cfg, BOUNDS, P)
        assert len(ds) == 5

    def test_label_residuals_verified_independently(self):
        cfg = DatagenConfig(n_x=2, n_s=0, n_starts=2, rng_seed=6)
        ds = label_dataset(self.constructive_points(30, seed=1), cfg, BOUNDS, P)
        for x, y in zip(ds.X, ds.Y):
            resid = reduced_g(x[0], y, P) - x[1:]
            assert np.max(np.abs(resid)) <= cfg.nlp_tolerance
            assert BOUNDS.contains(y, tol=1e-12)

    def test_worker_count_invariance(self):
        pts = self.constructive_points(24, seed=2)
        ds1 = label_dataset(pts, DatagenConfig(n_starts=2, rng_seed=9, workers=1), BOUNDS, P)
        ds4 = label_dataset(pts, DatagenConfig(n_starts=2, rng_seed=9, workers=4), BOUNDS, P)
        assert np.array_equal(ds1.X, ds4.X)
        assert np.array_equal(ds1.Y, ds4.Y)
        assert np.array_equal(ds1.residuals, ds4.residuals)

    def test_empty_dataset_raises(self):
        cfg = DatagenConfig(n_starts=1, rng_seed=0)
        bad = np.array([[0.0, 0.0, 4.0 * P.g, 0.0], [0.0, 0.0, 5.0 * P.g, 0.0]])
        with pytest.raises(EmptyDataset):
            label_dataset(bad, cfg, BOUNDS, P)


class TestPipeline:
    def test_small_end_to_end(self):
        cfg = DatagenConfig(theta_range=(-0.4, 0.4), n_x=2, n_s=30, n_starts=2, rng_seed=11)
        ds = generate_dataset(cfg, BOUNDS, P)
        assert ds.provenance["n_init"] == 64 + 30
        assert 0 < len(ds) <= 94
        # coverage: under constructive sampling plus generators, the retained
        # demands at each grid theta must reach out toward the vertex images
        thetas = np.unique(ds.X[:, 0])
        assert len(thetas) >= 2

    def test_round_trip(self, tmp_path):
        cfg = DatagenConfig(theta_range=(-0.4, 0.4), n_x=2, n_s=10, n_starts=2, rng_seed=12)
        ds = generate_dataset(cfg, BOUNDS, P)
        csv_path, meta_path = save_dataset(ds, str(tmp_path))
        loaded = load_dataset(csv_path)
        assert np.array_equal(loaded.X, ds.X)
        assert np.array_equal(loaded.Y, ds.Y)
        np.testing.assert_allclose(loaded.norm_stats.x_mean, ds.norm_stats.x_mean, atol=1e-15)
        assert loaded.provenance["n_kept"] == len(ds)

    def test_schema_guard(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            load_dataset(str(bad))
