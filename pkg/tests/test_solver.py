import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwls.errors import EmptyAfterFilter, RankDeficientWarning
from cwls.obs_model import ArrayGeometry, DdEpoch, geodesic_angle
from cwls.objective import WeightedModel
from cwls.simulator import ScenarioConfig, draw_trial, synthesize_epoch
from cwls.solver import (
    SolverParams,
    angle_filter,
    assemble_coarse_rotation,
    default_delta_theta,
    refine_multi,
    refine_single,
    search_candidates_single,
    solve,
    solve_multi_baseline,
    wahba_orthogonalize,
)
from oracles import random_rotations


def _scenario(n_sats, n_baselines, sigma_mm, trial, seed=7):
    cfg = ScenarioConfig(n_sats=n_sats, n_baselines=n_baselines, sigma_mm=sigma_mm, seed=seed)
    los, H, att, epoch, n_true = draw_trial(cfg, trial)
    return cfg.geometry(), H, att, epoch, n_true


class TestNoiseFree:
    @pytest.mark.parametrize("n_sats,A", [(4, 1), (6, 1), (4, 2), (6, 3), (8, 3)])
    def test_exact_recovery(self, n_sats, A):
        for trial in range(6):
            geo, H, att, epoch, n_true = _scenario(n_sats, A, 0.0, trial)
            rep = solve(epoch, H, geo)
            np.testing.assert_array_equal(rep.ambiguities, n_true)
            assert geodesic_angle(rep.rotation, att.rotation(geo.q)) < 1e-9
            assert rep.cost < 1e-12

    def test_recovered_rotation_orthonormal(self):
        geo, H, att, epoch, _ = _scenario(6, 3, 3.0, 1)
        R = solve(epoch, H, geo).rotation
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)

    def test_single_direction_unit_norm(self):
        geo, H, att, epoch, _ = _scenario(5, 1, 5.0, 3)
        r = solve(epoch, H, geo).rotation[:, 0]
        assert abs(np.linalg.norm(r) - 1) < 1e-12


class TestShiftInvariance:
    @settings(max_examples=10)
    @given(st.integers(0, 2**31), st.sampled_from([1, 2]))
    def test_integer_shift_moves_ambiguities_only(self, seed, A):
        geo, H, att, epoch, n_true = _scenario(5, A, 3.0, 0, seed=seed % 1000)
        # dyadic phases make psi + dn exact in floating point
        epoch = DdEpoch(np.round(epoch.psi * 2**30) / 2**30, epoch.rho, epoch.q_psi, epoch.q_rho)
        dn = np.random.default_rng(seed).integers(-1000, 1001, epoch.psi.shape)
        a = solve(epoch, H, geo)
        b = solve(epoch.shifted(dn), H, geo)
        np.testing.assert_array_equal(b.ambiguities, a.ambiguities + dn)
        np.testing.assert_array_equal(b.rotation, a.rotation)
        assert b.cost == a.cost


class TestSingleStages:
    def test_candidates_ranked_and_distinct(self):
        geo, H, att, epoch, _ = _scenario(6, 1, 3.0, 2)
        cand = search_candidates_single(epoch, H, 1.0)
        assert len(cand) <= SolverParams().K
        assert np.all(np.diff(cand.costs) >= 0)
        assert len({tuple(c) for c in cand.cells}) == len(cand)
        assert cand.pool_size >= len(cand)
        np.testing.assert_allclose(np.linalg.norm(cand.directions, axis=1), 1.0, atol=1e-12)

    def test_refinement_history_monotone(self, rng):
        geo, H, att, epoch, _ = _scenario(6, 1, 5.0, 4)
        for _ in range(10):
            r0 = rng.normal(size=3)
            res = refine_single(r0, epoch, H, 1.0)
            assert np.all(np.diff(res.history) <= 1e-12)
            assert res.cost == pytest.approx(res.history[-1])

    def test_refine_multi_history_monotone(self, rng):
        geo, H, att, epoch, _ = _scenario(6, 2, 5.0, 4)
        R = att.rotation(3) @ random_rotations(1, rng)[0]
        rep = refine_multi(wahba_orthogonalize(R), epoch, H, geo)
        assert np.all(np.diff(rep.history) <= 1e-12)

    def test_true_cell_among_candidates_noise_free(self):
        geo, H, att, epoch, n_true = _scenario(5, 1, 0.0, 5)
        cand = search_candidates_single(epoch, H, 1.0)
        assert any(np.array_equal(a, n_true.ravel()) for a in cand.ambiguities)


class TestMultiStages:
    def test_angle_filter_keeps_consistent_tuples(self):
        e = np.eye(3)
        dirs = [e[[0, 1]], e[[1, 2]], e[[2, 0]]]
        angles = np.full((3, 3), np.pi / 2)
        np.fill_diagonal(angles, 0)
        tuples = angle_filter(dirs, angles, np.deg2rad(1.0))
        # each tuple must be mutually orthogonal
        for t in tuples:
            v = np.array([dirs[a][t[a]] for a in range(3)])
            np.testing.assert_allclose(v @ v.T, np.eye(3), atol=1e-12)
        assert [tuple(t) for t in tuples] == sorted(tuple(t) for t in tuples)
        assert len(tuples) == 2

    def test_angle_filter_empty_raises(self):
        dirs = [np.array([[1.0, 0, 0]]), np.array([[1.0, 0, 0]])]
        angles = np.array([[0, np.pi / 2], [np.pi / 2, 0]])
        with pytest.raises(EmptyAfterFilter):
            angle_filter(dirs, angles, 0.01)

    @pytest.mark.parametrize("A", [2, 3])
    def test_assembly_exact_on_true_directions(self, rng, A):
        geo = ArrayGeometry.orthogonal(A, 1.5)
        R = random_rotations(1, rng)[0]
        dirs = (R @ geo.xb3 / geo.lengths).T
        np.testing.assert_allclose(assemble_coarse_rotation(dirs, geo), R, atol=1e-12)

    def test_wahba_examples(self, rng):
        np.testing.assert_allclose(wahba_orthogonalize(2 * np.eye(3)), np.eye(3), atol=1e-15)
        R = random_rotations(5, rng)
        np.testing.assert_allclose(wahba_orthogonalize(R), R, atol=1e-12)
        # reflection goes to a proper rotation
        Q = wahba_orthogonalize(np.diag([1.0, 1.0, -1.0]) + 0.01 * rng.normal(size=(3, 3)))
        assert np.linalg.det(Q) == pytest.approx(1.0)

    def test_wahba_warns_when_not_unique(self):
        with pytest.warns(RankDeficientWarning):
            wahba_orthogonalize(np.diag([1.0, 0.0, 0.0]))

    def test_delta_theta_within_clip(self):
        geo, H, att, epoch, _ = _scenario(6, 3, 9.0, 0)
        d = default_delta_theta(epoch, H, geo)
        assert d.shape == (3, 3)
        assert np.all((d >= np.deg2rad(1.0) - 1e-15) & (d <= np.deg2rad(3.0) + 1e-15))
        np.testing.assert_allclose(d, d.T)

    def test_empty_filter_falls_back_to_degraded(self):
        geo, H, att, epoch, _ = _scenario(6, 2, 3.0, 0)
        # wrong body-frame angle: no tuple can pass, twice-widened or not
        skew = ArrayGeometry(np.array([[1.0, 0.2], [0.0, 1.0]]))
        rep = solve_multi_baseline(epoch, H, skew, SolverParams(delta_theta=1e-6))
        assert rep.degraded
        assert rep.tuples_after_filter == 0
        assert np.max(np.abs(rep.rotation.T @ rep.rotation - np.eye(2))) < 1e-9

    def test_diagnostics_populated(self):
        geo, H, att, epoch, _ = _scenario(6, 3, 3.0, 0)
        d = solve(epoch, H, geo).diagnostics()
        assert len(d["pool_sizes"]) == 3 and len(d["kept"]) == 3
        assert d["tuples_after_filter"] >= 1
        assert not d["degraded"]

    def test_noisy_success_at_high_snr(self):
        hits = 0
        for trial in range(20):
            geo, H, att, epoch, n_true = _scenario(8, 3, 1.0, trial)
            hits += np.array_equal(solve(epoch, H, geo).ambiguities, n_true)
        assert hits == 20


class TestParams:
    @pytest.mark.parametrize("kw", [dict(K=0), dict(K_multi=0), dict(delta_theta=-1.0),
                                    dict(tail_probability=0.0), dict(tail_probability=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverParams(**kw)

    def test_bad_mode_rejected(self):
        geo, H, att, epoch, _ = _scenario(5, 1, 3.0, 0)
        with pytest.raises(ValueError):
            solve(epoch, H, geo, SolverParams(mode="phase"))

    def test_k_one_still_solves_noise_free(self):
        geo, H, att, epoch, n_true = _scenario(6, 1, 0.0, 1)
        rep = solve(epoch, H, geo, SolverParams(K=1))
        assert rep.cost < 1e-6 or not np.array_equal(rep.ambiguities, n_true)

    def test_diagonal_weighting_noise_free(self):
        geo, H, att, epoch, n_true = _scenario(6, 2, 0.0, 2)
        rep = solve(epoch, H, geo, SolverParams(weighting="diagonal", mode="phase_only"))
        np.testing.assert_array_equal(rep.ambiguities, n_true)


def test_model_shapes_follow_epoch():
    geo, H, att, epoch, _ = _scenario(5, 3, 3.0, 0)
    m = WeightedModel(epoch, H, geo.xb)
    assert m.shape == (4, 3) and m.q == 3


def test_synthesized_truth_has_zero_cost():
    geo, H, att, epoch, n_true = _scenario(5, 2, 0.0, 0)
    e2, _ = synthesize_epoch(att.rotation(2), geo, draw_trial(ScenarioConfig(n_sats=5, n_baselines=2, seed=7), 0)[0],
                             0.0, 0.0, np.random.default_rng(0), n_true=n_true)
    m = WeightedModel(e2, H, geo.xb)
    assert m.wrapped_cost(att.rotation(2)) < 1e-20
