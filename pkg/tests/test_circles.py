import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cwls.circles import (
    SphereCircle,
    axis_points,
    circle_bounds,
    circle_pair_intersections,
    enumerate_circles,
    intersect_arrays,
    pool_points,
)
from cwls.errors import CollinearAxes
from oracles import circles_meet_by_sampling


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestSphereCircle:
    @given(st.floats(-1, 1), st.integers(0, 2**31))
    def test_center_radius_identity(self, c, seed):
        axis = np.random.default_rng(seed).normal(size=3) * 7
        circ = SphereCircle(axis, c, 0, 0)
        assert np.linalg.norm(circ.center) ** 2 + circ.radius**2 == pytest.approx(1.0, abs=1e-12)

    def test_cosine_bounded(self):
        with pytest.raises(ValueError):
            SphereCircle(np.ones(3), 1.5, 0, 0)

    def test_enumeration_covers_reachable_integers(self, rng):
        H = rng.normal(size=(4, 3)) * 4
        psi = rng.uniform(-20, 20, 4)
        circles = enumerate_circles(psi, H, 1.0)
        lo, hi = circle_bounds(psi, np.linalg.norm(H, axis=1), 1.0)
        assert len(circles) == int(np.sum(hi - lo + 1))
        r = rng.normal(size=3)
        r /= np.linalg.norm(r)
        # the true direction lies on the circle of its own integer for every satellite
        for s in range(4):
            n = int(np.floor(psi[s] - H[s] @ r + 0.5))
            shifted = psi.copy()
            shifted[s] = H[s] @ r + n
            match = [c for c in enumerate_circles(shifted, H, 1.0) if c.satellite == s and c.ambiguity == n]
            assert len(match) == 1
            assert match[0].unit_axis @ r == pytest.approx(match[0].cos_theta, abs=1e-12)


    def test_margin_widens_bounds_symmetrically(self, rng):
        H = rng.normal(size=(5, 3)) * 4
        psi = rng.uniform(-20, 20, 5)
        norms = np.linalg.norm(H, axis=1)
        lo, hi = circle_bounds(psi, norms, 1.0)
        lo2, hi2 = circle_bounds(psi, norms, 1.0, margin=0.4)
        assert np.all(lo2 <= lo) and np.all(hi2 >= hi)
        assert np.all(lo2 >= lo - 1) and np.all(hi2 <= hi + 1)
        np.testing.assert_array_equal(lo2, np.ceil(psi - norms - 0.4))


class TestAxisPoints:
    def test_only_point_like_circles_contribute(self):
        axes = np.eye(3)
        cosines = [np.array([0.9999, 0.2, -0.9999]), np.array([0.5]), np.array([-0.99999])]
        pts, src, pairs = axis_points(axes, cosines, np.array([0.02, 0.02, 0.02]))
        np.testing.assert_array_equal(pts, [[-1, 0, 0], [1, 0, 0], [0, 0, -1]])
        np.testing.assert_array_equal(pairs, [[0, 0], [0, 0], [2, 2]])
        assert np.all(src == 4)

    def test_gap_threshold_on_radius(self):
        cos = np.sqrt(1 - 0.05**2)
        assert len(axis_points(np.eye(3)[:1], [np.array([cos])], 0.049)[0]) == 0
        assert len(axis_points(np.eye(3)[:1], [np.array([cos])], 0.051)[0]) == 1

    def test_empty(self):
        pts, src, pairs = axis_points(np.eye(3)[:2], [np.array([]), np.array([0.1])], 0.01)
        assert pts.shape == (0, 3) and pairs.shape == (0, 2)


class TestIntersectionKernel:
    def test_crossing_points_satisfy_both_planes(self, rng):
        n = 10_000
        us, um = _unit(rng, n), _unit(rng, n)
        cs, cm = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        q1, q2, p1, p2, d1, d2, crossing = intersect_arrays(us, um, cs, cm, 1e-3)
        assert crossing.any()
        for q in (q1[crossing], q2[crossing]):
            assert np.max(np.abs(np.sum(q * us[crossing], 1) - cs[crossing])) < 1e-10
            assert np.max(np.abs(np.sum(q * um[crossing], 1) - cm[crossing])) < 1e-10
            assert np.max(np.abs(np.linalg.norm(q, axis=1) - 1)) < 1e-12
        # peak points always lie on the m circle
        for p in (p1, p2):
            assert np.max(np.abs(np.sum(p * um, 1) - cm)) < 1e-10

    def test_existence_agrees_with_sampled_oracle(self, rng):
        checked = 0
        while checked < 20:
            us, um = _unit(rng, 1), _unit(rng, 1)
            cs, cm = rng.uniform(-1, 1, 2)
            *_, d1, d2, crossing = intersect_arrays(us, um, [cs], [cm], 1e-3)
            meets, gap = circles_meet_by_sampling(um[0], cm, us[0], cs, n=200_000)
            if gap < 1e-5:
                continue  # tangent within sampling resolution
            assert bool(crossing[0]) == meets
            checked += 1

    def test_collinear_axes_raise(self):
        with pytest.raises(CollinearAxes):
            intersect_arrays(np.array([[0, 0, 1.0]]), np.array([[0, 0, -1.0]]), [0.1], [0.2], 1e-3)

    def test_tangent_pair_gives_single_peak(self):
        # 45 degree circles about z and x touch only at (1, 0, 1) / sqrt(2)
        us = np.array([0.0, 0.0, 1.0])
        um = np.array([1.0, 0.0, 0.0])
        theta = np.pi / 4
        cs = SphereCircle(us, np.cos(theta), 0, 0)
        cm = SphereCircle(um, np.cos(theta), 1, 0)
        res = circle_pair_intersections(cs, cm, 1e-3)
        assert res.kind != "none"
        np.testing.assert_allclose(res.points, [[np.sqrt(0.5), 0, np.sqrt(0.5)]] * len(res.points), atol=1e-8)
        for p in res.points:
            assert p @ us == pytest.approx(np.cos(theta), abs=1e-9)
            assert p @ um == pytest.approx(np.cos(theta), abs=1e-9)

    def test_near_miss_returns_peak_points(self):
        us = np.array([0.0, 0.0, 1.0])
        um = np.array([1.0, 0.0, 0.0])
        # m circle top reaches z = sin(theta_m); s plane sits just above it
        cm = 0.6
        top = np.sqrt(1 - cm**2)
        res = circle_pair_intersections(SphereCircle(us, top + 5e-4, 0, 0), SphereCircle(um, cm, 1, 0), 1e-3)
        assert res.kind == "near_miss"
        assert len(res.points) == 1
        np.testing.assert_allclose(res.points[0], [cm, 0, top], atol=1e-12)
        far = circle_pair_intersections(SphereCircle(us, top + 5e-2, 0, 0), SphereCircle(um, cm, 1, 0), 1e-3)
        assert far.kind == "none" and len(far.points) == 0


class TestPool:
    def test_pool_matches_pairwise_kernel(self, rng):
        axes = _unit(rng, 4)
        cosines = [rng.uniform(-1, 1, rng.integers(1, 6)) for _ in range(4)]
        gap = np.full(4, 0.05)
        pts, src, pairs = pool_points(axes, cosines, gap)
        expect = []
        for s in range(4):
            for m in range(s + 1, 4):
                for a in cosines[s]:
                    for b in cosines[m]:
                        res = circle_pair_intersections(SphereCircle(axes[s], a, s, 0),
                                                        SphereCircle(axes[m], b, m, 0), 0.05)
                        for p, tag in zip(res.points, res.sources):
                            expect.append((s, m, tag, p))
        # the pool keeps both coincident peaks of a point circle; the pairwise helper drops one
        got = [(int(p[0]), int(p[1]), int(t), x) for p, t, x in zip(pairs, src, pts)]
        exp_keys = [(s, m, t) for s, m, t, _ in expect]
        got_keys = [(s, m, t) for s, m, t, _ in got]
        assert set(exp_keys) <= set(got_keys)
        for s, m, t, p in expect:
            cand = [x for (a, b, c, x) in got if (a, b, c) == (s, m, t)]
            assert min(np.linalg.norm(x - p) for x in cand) < 1e-10
        assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1)) < 1e-12
