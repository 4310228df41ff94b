import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from visfit.body_model import forward, matrix_to_axis_angle, rodrigues
from visfit.fitter import (
    FitConfig, FitProblem, FitResult, NumericalError, adam_step, estimate_root_depth, fit, gradient,
    init_params, kabsch_rotation, learning_rate_at,
)
from visfit.heatmaps import HeatmapGrid, to_grid
from visfit.objectives import LossWeights, total_fit_objective
from visfit.observations import ObservationError, Observations
from visfit.prior import gmm_nll
from visfit.synth import DEFAULT_CAMERA, SyntheticProblemSpec, fit_crop, make_problem


def observe(model, theta, beta, transl, camera=DEFAULT_CAMERA, root_depth=None):
    """Noiseless, fully visible observations of a posed body."""
    body = forward(model, theta, beta)
    V, J = body.vertices + transl, body.joints_out + transl
    crop = fit_crop(camera, V)
    grid = HeatmapGrid()
    return Observations(
        joints=to_grid(camera, grid, crop, J, transl[2]), vertices=to_grid(camera, grid, crop, V, transl[2]),
        joint_visibility=np.ones(J.shape), vertex_visibility=np.ones(V.shape), camera=camera, crop=crop,
        grid=grid, root_depth=root_depth)


def geodesic(R1, R2):
    return float(np.linalg.norm(matrix_to_axis_angle(R1.T @ R2)))


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


T0 = np.array([0.1, -0.05, 4.0])


class TestKabsch:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_recovers_rotation(self, seed):
        rng = np.random.default_rng(seed)
        R = random_rotation(rng)
        P = rng.normal(size=(10, 3))
        Q = P @ R.T + rng.normal(size=3)
        np.testing.assert_allclose(kabsch_rotation(P, Q), R, atol=1e-9)

    def test_reflection_excluded(self):
        P = np.random.default_rng(0).normal(size=(8, 3))
        R = kabsch_rotation(P, P * [1, 1, -1])
        assert np.linalg.det(R) == pytest.approx(1.0)


class TestInit:
    def test_rest_pose_gives_identity(self, mini):
        obs = observe(mini, np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), T0)
        theta, beta, t, low = init_params(FitProblem(mini, obs))
        assert np.all(theta[1:] == 0) and np.all(beta == 0) and not low
        assert np.linalg.norm(theta[0]) < 1e-3
        np.testing.assert_allclose(t, T0, atol=1e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_known_rotation_recovered(self, mini, seed):
        rng = np.random.default_rng(seed)
        R = random_rotation(rng) if seed else rodrigues([np.pi, 0.0, 0.0])
        theta = np.zeros((mini.n_kin, 3))
        theta[0] = matrix_to_axis_angle(R)
        obs = observe(mini, theta, np.zeros(mini.n_betas), T0)
        theta0, _, t, _ = init_params(FitProblem(mini, obs))
        assert geodesic(rodrigues(theta0[0]), R) < 1e-3
        np.testing.assert_allclose(t, T0, atol=1e-3)

    def test_no_prior_zero_body_pose(self, mini):
        rng = np.random.default_rng(1)
        obs = observe(mini, random_pose(rng, mini.n_kin), rng.normal(size=mini.n_betas), T0)
        theta, beta, _, _ = init_params(FitProblem(mini, obs))
        assert np.all(theta[1:] == 0.0) and np.all(beta == 0.0)

    def test_prior_mode_start(self, mini, prior):
        obs = observe(mini, random_pose(np.random.default_rng(2), mini.n_kin), np.zeros(mini.n_betas), T0)
        theta, _, _, _ = init_params(FitProblem(mini, obs, prior))
        k = int(np.argmax(prior.weights))
        np.testing.assert_array_equal(theta[1:].ravel(), prior.means[k])

    def test_few_visible_joints_flagged(self, mini):
        rng = np.random.default_rng(3)
        obs = observe(mini, random_pose(rng, mini.n_kin), np.zeros(mini.n_betas), T0)
        jv = np.zeros_like(obs.joint_visibility)
        jv[:2] = 1.0
        theta, _, _, low = init_params(FitProblem(mini, obs.replace(joint_visibility=jv)))
        assert low and np.all(theta[0] == 0)
        result = fit(FitProblem(mini, obs.replace(joint_visibility=jv)), FitConfig(max_iters=2))
        assert result.low_confidence_init

    def test_root_depth_exact_for_rest_shape(self, mini):
        obs = observe(mini, np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), np.array([0.0, 0.1, 3.7]))
        assert estimate_root_depth(mini, obs) == pytest.approx(3.7, abs=1e-6)

    def test_trusted_root_depth_used(self, mini):
        obs = observe(mini, np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), T0, root_depth=4.0)
        _, _, t, _ = init_params(FitProblem(mini, obs))
        assert t[2] == 4.0

    def test_no_visible_vertices_falls_back(self, mini):
        obs = observe(mini, np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), T0)
        obs = obs.replace(vertex_visibility=np.zeros_like(obs.vertex_visibility))
        assert estimate_root_depth(mini, obs) is None
        _, _, t, _ = init_params(FitProblem(mini, obs))
        assert np.isfinite(t).all() and t[2] > 0


class TestAdam:
    def test_single_step_matches_formula(self, mini, prior):
        p = make_problem(mini, SyntheticProblemSpec(seed=4, occluded_fraction=0.2), prior)
        cfg = FitConfig(max_iters=1)
        theta0, beta0, t0, _ = init_params(FitProblem(mini, p.observations, prior))
        _, _, g = total_fit_objective(mini, theta0, beta0, t0, p.observations, cfg.weights, prior,
                                      return_grad=True)
        x0 = np.concatenate([theta0.ravel(), beta0, t0])
        gx = np.concatenate([g["theta"].ravel(), g["beta"], g["transl"]])
        # step 1: m_hat = g, v_hat = g^2
        expected = x0 - 0.05 * gx / (np.abs(gx) + 1e-8)
        r = fit(FitProblem(mini, p.observations, prior), cfg)
        got = np.concatenate([r.theta.ravel(), r.beta, r.transl])
        np.testing.assert_allclose(got, expected, atol=1e-9, rtol=0)
        assert r.n_iters == 1 and len(r.trace) == 2 and r.trace[1]["accepted"]

    def test_adam_step_second_step(self):
        cfg = FitConfig(max_iters=10, learning_rate=0.1, lr_final_factor=1.0)
        x, g1, g2 = np.array([1.0, -2.0]), np.array([0.5, -1.0]), np.array([0.2, 0.4])
        x1, m, v = adam_step(x, g1, 0.0, 0.0, 1, cfg)
        x2, m, v = adam_step(x1, g2, m, v, 2, cfg)
        m_ref = 0.9 * 0.1 * g1 + 0.1 * g2
        v_ref = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
        step = 0.1 * (m_ref / (1 - 0.81)) / (np.sqrt(v_ref / (1 - 0.999 ** 2)) + 1e-8)
        np.testing.assert_allclose(x2, x1 - step, atol=1e-12)

    def test_learning_rate_schedule(self):
        cfg = FitConfig(max_iters=11, learning_rate=0.05, lr_final_factor=0.1)
        assert learning_rate_at(1, cfg) == pytest.approx(0.05)
        assert learning_rate_at(11, cfg) == pytest.approx(0.005)
        assert learning_rate_at(6, cfg) == pytest.approx(0.05 * 0.1 ** 0.5)

    def test_zero_iterations_forbidden(self):
        with pytest.raises(ValueError):
            FitConfig(max_iters=0)

    def test_beta_clamped(self, mini):
        obs = observe(mini, np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), T0)
        # targets from a body with extreme shape drive beta against the clamp
        far = observe(mini, np.zeros((mini.n_kin, 3)), np.full(mini.n_betas, 20.0), T0)
        obs = obs.replace(vertices=far.vertices, joints=far.joints)
        r = fit(FitProblem(mini, obs), FitConfig(max_iters=5, learning_rate=10.0))
        assert np.all(np.abs(r.beta) <= 5.0)


class TestGradientHelper:
    def test_constant(self):
        def f(x, return_grad=False):
            return (3.0, np.zeros_like(x)) if return_grad else 3.0

        np.testing.assert_array_equal(gradient(f, np.ones(4)), np.zeros(4))

    def test_l2_on_beta(self, mini):
        def f(beta, return_grad=False):
            return (float(beta @ beta), 2 * beta) if return_grad else float(beta @ beta)

        beta = np.random.default_rng(5).normal(size=mini.n_betas)
        np.testing.assert_array_equal(gradient(f, beta), 2 * beta)

    def test_non_finite_params(self):
        with pytest.raises(NumericalError):
            gradient(lambda x, return_grad=False: (0.0, x), np.array([np.nan]))


class TestFit:
    def test_deterministic(self, mini, prior):
        p = make_problem(mini, SyntheticProblemSpec(seed=6, occluded_fraction=0.4), prior)
        a = fit(FitProblem(mini, p.observations, prior), FitConfig(max_iters=30))
        b = fit(FitProblem(mini, p.observations, prior), FitConfig(max_iters=30))
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_gating_ignores_garbage(self, mini, prior):
        p = make_problem(mini, SyntheticProblemSpec(seed=7, occluded_fraction=0.4), prior)
        obs = p.observations
        hidden = obs.vertex_visibility[:, 2] == 0
        assert hidden.any()
        garbage = obs.vertices.copy()
        garbage[hidden] *= np.random.default_rng(7).uniform(-1e6, 1e6, (hidden.sum(), 3))
        cfg = FitConfig(max_iters=25)
        a = fit(FitProblem(mini, obs, prior), cfg)
        b = fit(FitProblem(mini, obs.replace(vertices=garbage), prior), cfg)
        assert [s["total"] for s in a.trace] == [s["total"] for s in b.trace]

    @pytest.mark.parametrize("seed", range(4))
    def test_objective_decreases(self, mini, prior, seed):
        spec = SyntheticProblemSpec(seed=seed, occluded_fraction=0.4 if seed % 2 else 0.0)
        p = make_problem(mini, spec, prior)
        r = fit(FitProblem(mini, p.observations, prior), FitConfig(max_iters=100))
        totals = [s["total"] for s in r.trace if s["accepted"]]
        assert totals[-1] < totals[0]
        # after iteration 10 the accepted iterates never rise more than 5% above an earlier one
        for i in range(11, len(totals)):
            assert totals[i] <= 1.05 * min(totals[10:i])

    def test_prior_pull(self, mini, prior):
        p = make_problem(mini, SyntheticProblemSpec(seed=8), prior)
        obs = p.observations
        obs = obs.replace(vertex_visibility=np.zeros_like(obs.vertex_visibility),
                          joint_visibility=np.zeros_like(obs.joint_visibility))
        start = random_pose(np.random.default_rng(8), mini.n_kin, 0.3)
        cfg = FitConfig(max_iters=1000, rel_tol=0.0, lr_final_factor=0.01, freeze_translation=True)
        r = fit(FitProblem(mini, obs, prior), cfg, init=(start, np.zeros(mini.n_betas), p.truth.transl))
        _, g = gmm_nll(r.theta[1:].ravel(), prior, return_grad=True)
        assert np.linalg.norm(g) < 1e-4
        assert r.trace[-1]["prior"] < r.trace[0]["prior"]

    def test_rejected_steps_fall_back_to_best(self, mini, prior):
        p = make_problem(mini, SyntheticProblemSpec(seed=12), prior)
        r = fit(FitProblem(mini, p.observations, prior), FitConfig(max_iters=30, learning_rate=1.0))
        flags = [s["accepted"] for s in r.trace]
        assert flags[0] and not all(flags)
        accepted = [s["total"] for s in r.trace if s["accepted"]]
        for i in range(1, len(accepted)):
            assert accepted[i] <= 1.05 * min(accepted[:i])
        assert r.objective <= r.trace[0]["total"]
        ours = total_fit_objective(mini, r.theta, r.beta, r.transl, p.observations, prior=prior)[0]
        assert ours == pytest.approx(r.objective, rel=1e-12)

    def test_freeze_translation(self, mini, prior):
        p = make_problem(mini, SyntheticProblemSpec(seed=9), prior)
        init = init_params(FitProblem(mini, p.observations, prior))[:3]
        r = fit(FitProblem(mini, p.observations, prior), FitConfig(max_iters=10, freeze_translation=True), init)
        np.testing.assert_array_equal(r.transl, init[2])

    def test_converges_early_on_exact_start(self, mini):
        theta = random_pose(np.random.default_rng(10), mini.n_kin)
        obs = observe(mini, theta, np.zeros(mini.n_betas), T0)
        cfg = FitConfig(max_iters=100, weights=LossWeights(prior=0))
        r = fit(FitProblem(mini, obs), cfg, init=(theta, np.zeros(mini.n_betas), T0))
        assert r.converged and r.stop_reason == "rel_tol" and r.n_iters < 100

    def test_non_finite_observation_names_term(self, mini):
        obs = observe(mini, np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), T0)
        bad = obs.vertices.copy()
        bad[5, 0] = np.inf
        with pytest.raises(NumericalError, match="smpl_vert.*initialisation"):
            fit(FitProblem(mini, obs.replace(vertices=bad)), FitConfig(max_iters=3),
                init=(np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), T0))


class TestContainers:
    def test_fit_result_round_trip(self, mini, prior):
        p = make_problem(mini, SyntheticProblemSpec(seed=11), prior)
        r = fit(FitProblem(mini, p.observations, prior), FitConfig(max_iters=3))
        back = FitResult.from_dict(json.loads(json.dumps(r.to_dict())))
        np.testing.assert_array_equal(back.theta, r.theta)
        assert back.trace == r.trace and back.n_iters == r.n_iters and back.stop_reason == r.stop_reason

    def test_config_round_trip(self):
        cfg = FitConfig(max_iters=7, weights=LossWeights(prior=0.5), weighting="uniform")
        back = FitConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    @pytest.mark.parametrize("bad", [{"max_iters": -1}, {"learning_rate": 0.0}, {"weighting": "x"},
                                     {"unknown_key": 1}, {"lr_final_factor": 0.0},
                                     {"backtrack_tol": 0.0}, {"backtrack_factor": 1.5}])
    def test_config_rejects(self, bad):
        with pytest.raises(ValueError):
            FitConfig.from_dict(bad)

    def test_problem_dimension_checks(self, mini, prior):
        obs = observe(mini, np.zeros((mini.n_kin, 3)), np.zeros(mini.n_betas), T0)
        with pytest.raises(ObservationError):
            FitProblem(mini, obs.replace(vertices=obs.vertices[:-1], vertex_visibility=obs.vertex_visibility[:-1]))
        from visfit.prior import make_synthetic_prior
        with pytest.raises(ValueError, match="prior dimension"):
            FitProblem(mini, obs, make_synthetic_prior(6))
