"""Spatial index exactness against brute-force scans, file round trips."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyrhead.spatial import (PointSet, ball_query, batch_query_capped,
                             build_index, extended_query)


def scan_oracle(coords, center, r, max_k=None):
    """Linear scan; sorted by (distance, id), capped at max_k nearest."""
    center = np.asarray(center, float)
    d = np.linalg.norm(coords - center, axis=1) if len(coords) else np.zeros(0)
    ids = np.nonzero(d <= r)[0]
    order = np.lexsort((ids, d[ids]))
    if max_k is not None:
        order = order[:max_k]
    return ids[order]


def random_pointset(rng, n, span=20.0):
    return PointSet(rng.uniform(0, span, size=(n, 3)), np.zeros((n, 1)))


class TestBallQuery:
    def test_empty_pointset(self):
        idx = build_index(PointSet.empty(4), cell=1.0)
        assert ball_query(idx, [0, 0, 0], 1.0, 8).size == 0

    def test_single_point_at_origin(self):
        ps = PointSet(np.zeros((1, 3)), np.zeros((1, 2)))
        idx = build_index(ps, cell=1.0)
        np.testing.assert_array_equal(ball_query(idx, [0, 0, 0], 1.0, 8), [0])

    def test_membership_by_distance(self):
        ps = PointSet(np.array([[0.5, 0, 0], [1.5, 0, 0]]), np.zeros((2, 1)))
        idx = build_index(ps, cell=1.0)
        np.testing.assert_array_equal(ball_query(idx, [0, 0, 0], 1.0, 8), [0])

    def test_boundary_point_included(self):
        ps = PointSet(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 1)))
        idx = build_index(ps, cell=0.7)
        np.testing.assert_array_equal(ball_query(idx, [0, 0, 0], 1.0, 4), [0])

    def test_cap_keeps_nearest_by_sort_oracle(self):
        rng = np.random.default_rng(1)
        ps = random_pointset(rng, 20, span=4.0)
        idx = build_index(ps, cell=1.0)
        center = np.array([2.0, 2.0, 2.0])
        got = ball_query(idx, center, 50.0, 5)
        np.testing.assert_array_equal(got, scan_oracle(ps.coords, center, 50.0, 5))

    def test_large_scene_matches_scan(self):
        rng = np.random.default_rng(3)
        ps = random_pointset(rng, 10_000)
        idx = build_index(ps, cell=1.3)
        for _ in range(100):
            center = rng.uniform(0, 20, 3)
            r = float(rng.uniform(0.2, 3.0))
            got = ball_query(idx, center, r, 10**9)
            np.testing.assert_array_equal(np.sort(got),
                                          np.sort(scan_oracle(ps.coords, center, r)))

    def test_ordered_by_distance_then_id(self):
        coords = np.array([[1.0, 0, 0], [0.5, 0, 0], [-0.5, 0, 0]])
        idx = build_index(PointSet(coords, np.zeros((3, 1))), cell=1.0)
        np.testing.assert_array_equal(ball_query(idx, [0, 0, 0], 2.0, 8),
                                      [1, 2, 0])

    def test_invalid_args(self):
        idx = build_index(PointSet.empty(1), cell=1.0)
        with pytest.raises(ValueError):
            ball_query(idx, [0, 0, 0], -1.0, 4)
        with pytest.raises(ValueError):
            ball_query(idx, [0, 0, 0], 1.0, 0)
        with pytest.raises(ValueError):
            build_index(PointSet.empty(1), cell=0.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_property_equivalence_and_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 300))
        ps = random_pointset(rng, n, span=8.0)
        idx = build_index(ps, cell=float(rng.uniform(0.4, 3.0)))
        center = rng.uniform(-1, 9, 3)
        r1, r2 = sorted(rng.uniform(0.1, 4.0, 2))
        inner = ball_query(idx, center, r1, 10**9)
        outer = ball_query(idx, center, r2, 10**9)
        np.testing.assert_array_equal(np.sort(inner),
                                      np.sort(scan_oracle(ps.coords, center, r1)))
        np.testing.assert_array_equal(np.sort(outer),
                                      np.sort(scan_oracle(ps.coords, center, r2)))
        assert set(inner.tolist()) <= set(outer.tolist())

    def test_determinism_across_runs(self):
        rng = np.random.default_rng(11)
        ps = random_pointset(rng, 500)
        a = build_index(ps, cell=1.0)
        b = build_index(ps, cell=1.0)
        for _ in range(10):
            c = rng.uniform(0, 20, 3)
            np.testing.assert_array_equal(ball_query(a, c, 2.0, 7),
                                          ball_query(b, c, 2.0, 7))


class TestExtendedQuery:
    def test_tiny_tau_equals_ball_query(self):
        rng = np.random.default_rng(2)
        ps = random_pointset(rng, 200, span=5.0)
        idx = build_index(ps, cell=1.0)
        c = np.array([2.5, 2.5, 2.5])
        np.testing.assert_array_equal(extended_query(idx, c, 1.0, 1e-15, 64),
                                      ball_query(idx, c, 1.0, 64))

    def test_range_arithmetic(self):
        tau, r = 0.1, 1.0
        coords = np.array([[r + 4 * tau, 0, 0], [r + 6 * tau, 0, 0]])
        idx = build_index(PointSet(coords, np.zeros((2, 1))), cell=1.0)
        got = extended_query(idx, [0, 0, 0], r, tau, 8)
        np.testing.assert_array_equal(got, [0])

    def test_matches_scan_at_widened_radius(self):
        rng = np.random.default_rng(11)
        ps = random_pointset(rng, 2000)
        idx = build_index(ps, cell=1.5)
        for _ in range(25):
            c = rng.uniform(0, 20, 3)
            r, tau = float(rng.uniform(0.3, 2.0)), float(rng.uniform(1e-4, 0.2))
            got = extended_query(idx, c, r, tau, 10**9)
            np.testing.assert_array_equal(
                np.sort(got), np.sort(scan_oracle(ps.coords, c, r + 5 * tau)))

    def test_tau_must_be_positive(self):
        idx = build_index(PointSet.empty(1), cell=1.0)
        with pytest.raises(ValueError):
            extended_query(idx, [0, 0, 0], 1.0, 0.0, 4)


class TestBatchQuery:
    @pytest.mark.parametrize("seed", [0, 5, 9])
    def test_matches_per_center_queries(self, seed):
        rng = np.random.default_rng(seed)
        ps = random_pointset(rng, 1500, span=12.0)
        idx = build_index(ps, cell=1.1)
        centers = rng.uniform(0, 12, size=(40, 3))
        for r, cap in [(0.5, 4), (1.4, 8), (3.0, 16)]:
            batch = batch_query_capped(idx, centers, r, cap)
            for c, (ids, d) in zip(centers, batch):
                want_ids, want_d = idx.query_capped_ids(c, r, cap)
                np.testing.assert_array_equal(ids, want_ids)
                np.testing.assert_array_equal(d, want_d)


class TestPointSetIO:
    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ps = PointSet(rng.normal(size=(17, 3)), rng.normal(size=(17, 5)))
        path = tmp_path / "fixture.pset"
        ps.save(path)
        back = PointSet.load(path)
        assert len(back) == 17 and back.feat_width == 5
        # stored as f32 by format
        np.testing.assert_allclose(back.coords, ps.coords, atol=1e-6)
        np.testing.assert_allclose(back.feats, ps.feats, atol=1e-6)

    def test_binary_header(self, tmp_path):
        ps = PointSet(np.zeros((2, 3)), np.ones((2, 4)))
        path = tmp_path / "h.pset"
        ps.save(path)
        raw = path.read_bytes()
        assert raw[:4] == b"PSET"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 4
        assert len(raw) == 12 + 2 * 3 * 4 + 2 * 4 * 4

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.pset"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(ValueError):
            PointSet.load(path)

    def test_json_round_trip(self):
        ps = PointSet([[0, 1, 2], [3, 4, 5]], [[1.0], [2.0]])
        back = PointSet.from_json(ps.to_json())
        np.testing.assert_array_equal(back.coords, ps.coords)
        np.testing.assert_array_equal(back.feats, ps.feats)

    def test_mismatched_rows_raise(self):
        with pytest.raises(ValueError):
            PointSet(np.zeros((3, 3)), np.zeros((2, 4)))
