import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cwls.lsq import (
    euler_gauss_newton,
    euler_gauss_newton_batch,
    rotation_block,
    rotation_jacobian,
    unit_norm_lstsq,
    vec_columns,
)
from cwls.obs_model import rotation_matrix
from oracles import central_difference, elementary_rotation, unit_norm_lstsq_by_search


def _solve(B, z):
    return unit_norm_lstsq(B.T @ B, (B.T @ z)[None])[0]


class TestUnitNormLstsq:
    def test_matches_search_oracle(self, rng):
        for _ in range(8):
            B = rng.normal(size=(5, 3)) * rng.uniform(0.2, 4)
            z = rng.normal(size=5) * rng.uniform(0.1, 5)
            r = _solve(B, z)
            _, best = unit_norm_lstsq_by_search(B, z, starts=8)
            assert np.linalg.norm(r) == pytest.approx(1.0, abs=1e-14)
            got = float(np.sum((B @ r - z) ** 2))
            assert got <= best + 1e-9 * max(1.0, best)

    def test_exact_consistent_data(self, rng):
        B = rng.normal(size=(6, 3))
        r0 = rng.normal(size=3)
        r0 /= np.linalg.norm(r0)
        np.testing.assert_allclose(_solve(B, B @ r0), r0, atol=1e-10)

    def test_hard_case(self):
        # g orthogonal to the bottom eigenvector and too short to reach the sphere
        M = np.diag([1.0, 2.0, 3.0])
        g = np.array([[0.0, 0.3, 0.4]])
        r = unit_norm_lstsq(M, g)[0]
        tail = np.array([0.3 / 1.0, 0.4 / 2.0])
        expect = np.array([np.sqrt(1 - tail @ tail), *tail])
        assert np.abs(r) == pytest.approx(np.abs(expect), abs=1e-12)
        cost = lambda v: v @ M @ v - 2 * g[0] @ v
        grid = np.random.default_rng(0).normal(size=(20000, 3))
        grid /= np.linalg.norm(grid, axis=1, keepdims=True)
        assert cost(r) <= np.min(np.einsum("ij,jk,ik->i", grid, M, grid) - 2 * grid @ g[0]) + 1e-12

    def test_precomputed_eigendecomposition_is_equivalent(self, rng):
        B = rng.normal(size=(6, 3))
        G = rng.normal(size=(9, 3))
        M = B.T @ B
        np.testing.assert_array_equal(unit_norm_lstsq(M, G, eig=np.linalg.eigh(M)), unit_norm_lstsq(M, G))

    def test_zero_linear_term_gives_bottom_eigenvector(self):
        M = np.diag([3.0, 1.0, 2.0])
        r = unit_norm_lstsq(M, np.zeros((1, 3)))[0]
        np.testing.assert_allclose(np.abs(r), [0, 1, 0], atol=1e-14)

    @given(st.integers(0, 2**31))
    def test_batch_equals_rowwise(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.normal(size=(4, 3))
        G = rng.normal(size=(7, 3))
        M = B.T @ B
        batch = unit_norm_lstsq(M, G)
        for i in range(7):
            np.testing.assert_allclose(batch[i], unit_norm_lstsq(M, G[i:i + 1])[0], atol=1e-13)

    @given(st.integers(0, 2**31))
    def test_stationarity(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.normal(size=(5, 3))
        z = rng.normal(size=5) * 3
        r = _solve(B, z)
        grad = B.T @ (B @ r - z)
        # constrained optimum: gradient parallel to r
        assert np.linalg.norm(grad - (grad @ r) * r) < 1e-8 * max(1.0, np.linalg.norm(grad))


class TestRotationParameterization:
    @given(st.floats(-3, 3), st.floats(-1.5, 1.5), st.floats(-3, 3), st.sampled_from([1, 2, 3]))
    def test_jacobian_matches_finite_differences(self, a, b, g, q):
        f = lambda x: rotation_block(x, q).ravel(order="F")
        num = central_difference(f, [a, b, g])
        ana = rotation_jacobian([a, b, g], q)
        scale = max(1.0, np.max(np.abs(ana)))
        assert np.max(np.abs(ana - num)) <= 1e-5 * scale

    def test_stack_matches_elementary(self, rng):
        ang = rng.uniform(-3, 3, (20, 3))
        for x in ang:
            np.testing.assert_allclose(rotation_block(x, 3), elementary_rotation(*x), atol=1e-14)
            np.testing.assert_allclose(rotation_block(x, 3), rotation_matrix(*x), atol=1e-14)

    def test_vec_is_column_major(self):
        R = rotation_matrix(0.1, 0.2, 0.3)[None]
        np.testing.assert_array_equal(vec_columns(R, 2)[0], R[0, :, :2].ravel(order="F"))


class TestGaussNewton:
    def _problem(self, rng, q, noise=0.0):
        B = np.kron(np.eye(q), rng.normal(size=(6, 3)) * 3)
        truth = np.array([rng.uniform(-3, 3), rng.uniform(-1.2, 1.2), rng.uniform(-3, 3)])
        z = B @ rotation_block(truth, q).ravel(order="F") + noise * rng.normal(size=6 * q)
        return B, z, truth

    @pytest.mark.parametrize("q", [2, 3])
    def test_converges_from_nearby_start(self, rng, q):
        for _ in range(10):
            B, z, truth = self._problem(rng, q)
            res = euler_gauss_newton(B, z, truth + rng.normal(scale=0.05, size=3), q)
            assert res.converged
            assert res.cost < 1e-18
            np.testing.assert_allclose(rotation_block(res.angles, q), rotation_block(truth, q), atol=1e-9)

    def test_cost_never_increases(self, rng):
        B, z, truth = self._problem(rng, 3, noise=0.5)
        x0 = truth + 0.3
        c0 = float(np.sum((z - B @ rotation_block(x0, 3).ravel(order="F")) ** 2))
        for it in range(1, 8):
            res = euler_gauss_newton(B, z, x0, 3, max_iter=it)
            assert res.cost <= c0 + 1e-12
            c0 = res.cost

    def test_batch_rows_independent(self, rng):
        B, z, truth = self._problem(rng, 2, noise=0.1)
        starts = truth + rng.normal(scale=0.1, size=(5, 3))
        x, c, it, conv = euler_gauss_newton_batch(B, np.tile(z, (5, 1)), starts, 2)
        for i in range(5):
            single = euler_gauss_newton(B, z, starts[i], 2)
            assert c[i] == pytest.approx(single.cost, rel=1e-12)
