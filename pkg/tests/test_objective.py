"""Objective value, analytic gradient, and penalty behavior."""

import numpy as np
import pytest

from undistort.errors import DimensionMismatch, InfeasibleRender, InputError
from undistort.landmarks import LandmarkSet
from undistort.objective import (
    IDX_DTZ,
    IDX_GAMMA,
    N_CAMERA_PARAMS,
    OptParams,
    fd_gradient_oracle,
    gradient,
    landmark_loss,
    loss_and_gradient,
    total_loss,
)
from undistort.synth import SynthSpec, generate, problem_from_instance

_SMALL = SynthSpec(n_landmarks=24, latent_dim=5, width=256, height=256)


def _perturbed_params(problem, inst, rng, scale=1.0):
    """Pack the true state, then jitter every slot a little."""
    cam = inst.true_cam
    n = problem.observed.n
    k = inst.true_latent.w.shape[0]
    sigmas = np.full(n, 0.004)
    latent = inst.true_latent
    if latent.residual is None:
        from undistort.facemodel import FaceLatent

        latent = FaceLatent(w=latent.w, residual=np.zeros((n, 3)))
    params = OptParams.from_state(cam, latent, sigmas)
    x = params.x.copy()
    x[IDX_DTZ] *= 1.0 + 0.3 * scale * rng.uniform(-1, 1)
    x[1:3] += 0.01 * scale * rng.normal(size=2)
    x[3:6] += 0.05 * scale * rng.normal(size=3)
    x[IDX_GAMMA] *= 1.0 + 0.1 * scale * rng.uniform(-1, 1)
    x[params.sl_w] += 0.3 * scale * rng.normal(size=k)
    x[params.sl_residual] += 0.002 * scale * rng.normal(size=3 * n)
    x[params.sl_log_sigma] += 0.2 * scale * rng.normal(size=n)
    return params.with_x(x)


def _rel_error(analytic, numeric):
    denom = max(float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom


class TestGradient:
    def test_matches_central_difference(self, small_instance, rng):
        problem = problem_from_instance(small_instance)
        for _ in range(10):
            params = _perturbed_params(problem, small_instance, rng)
            analytic = gradient(problem, params)
            numeric = fd_gradient_oracle(problem, params)
            assert _rel_error(analytic, numeric) < 1e-5

    def test_matches_fd_without_reparam(self, small_instance, rng):
        # Direct t_z layout: slot 0 is the physical depth, focal fixed.
        problem = problem_from_instance(small_instance)
        params = _perturbed_params(problem, small_instance, rng)
        x = params.x.copy()
        x[IDX_DTZ] = small_instance.true_cam.extrinsics.translation[2]
        direct = OptParams(
            x, params.n_landmarks, params.latent_dim, reparam=False,
            t_z0=params.t_z0, d0=params.d0, f0=params.f0,
            cx=params.cx, cy=params.cy,
            width=params.width, height=params.height)
        analytic = gradient(problem, direct)
        numeric = fd_gradient_oracle(problem, direct)
        assert _rel_error(analytic, numeric) < 1e-5

    def test_loss_and_gradient_consistent(self, small_instance, rng):
        problem = problem_from_instance(small_instance)
        params = _perturbed_params(problem, small_instance, rng)
        breakdown, grad = loss_and_gradient(problem, params)
        grad_only = gradient(problem, params)
        np.testing.assert_array_equal(grad, grad_only)
        assert breakdown.total == pytest.approx(
            breakdown.landmark + breakdown.sigma_log
            + problem.config.lambda_res * breakdown.residual_reg
            + problem.config.lambda_w * breakdown.latent_reg)

    def test_infeasible_depth_raises(self, small_instance):
        problem = problem_from_instance(small_instance)
        inst = small_instance
        from undistort.facemodel import FaceLatent

        n = problem.observed.n
        latent = FaceLatent(w=inst.true_latent.w, residual=np.zeros((n, 3)))
        params = OptParams.from_state(inst.true_cam, latent, np.full(n, 0.004))
        x = params.x.copy()
        # t_z = t_z0 / sqrt(delta): a huge delta drags the face through the
        # camera plane.
        x[IDX_DTZ] = 1e8
        with pytest.raises(InfeasibleRender):
            loss_and_gradient(problem, params.with_x(x))

    def test_wrong_layout_rejected(self, small_instance):
        problem = problem_from_instance(small_instance)
        with pytest.raises(DimensionMismatch):
            OptParams(
                np.zeros(10), 24, 5, reparam=True, t_z0=1.0, d0=1.0,
                f0=600.0, cx=128.0, cy=128.0, width=256, height=256)


class TestLandmarkLoss:
    def _pair(self):
        obs = LandmarkSet(
            points=np.array([[0.4, 0.5], [0.6, 0.5], [0.5, 0.6]]),
            visibility=np.array([True, True, True]),
            sigma=np.array([0.01, 0.02, 0.01]))
        pred = LandmarkSet(
            points=obs.points + np.array([[0.01, 0.0], [0.0, -0.02], [0.0, 0.0]]),
            visibility=np.array([True, True, True]),
            sigma=obs.sigma)
        return obs, pred

    def test_hand_computed_value(self):
        obs, pred = self._pair()
        out = landmark_loss(obs, pred)
        expected_quad = (0.01 ** 2) / (2 * 0.01 ** 2) + (0.02 ** 2) / (2 * 0.02 ** 2)
        expected_log = 2 * (np.log(0.01) + np.log(0.02) + np.log(0.01))
        assert out.landmark == pytest.approx(expected_quad, rel=1e-12)
        assert out.sigma_log == pytest.approx(expected_log, rel=1e-12)
        assert out.total == pytest.approx(expected_quad + expected_log, rel=1e-12)

    def test_visibility_gates_terms(self):
        obs, pred = self._pair()
        masked = LandmarkSet(points=obs.points,
                             visibility=np.array([True, False, True]),
                             sigma=obs.sigma)
        out = landmark_loss(masked, pred)
        expected_quad = (0.01 ** 2) / (2 * 0.01 ** 2)
        expected_log = 2 * (np.log(0.01) + np.log(0.01))
        assert out.landmark == pytest.approx(expected_quad, rel=1e-12)
        assert out.sigma_log == pytest.approx(expected_log, rel=1e-12)

    def test_bigger_sigma_downweights(self):
        obs, pred = self._pair()
        tight = landmark_loss(obs, pred, sigma=np.full(3, 0.005))
        loose = landmark_loss(obs, pred, sigma=np.full(3, 0.05))
        assert tight.landmark > loose.landmark

    def test_count_mismatch_rejected(self):
        obs, pred = self._pair()
        short = LandmarkSet(points=pred.points[:2],
                            visibility=pred.visibility[:2],
                            sigma=pred.sigma[:2])
        with pytest.raises(DimensionMismatch):
            landmark_loss(obs, short)

    def test_nonpositive_sigma_rejected(self):
        obs, pred = self._pair()
        with pytest.raises(InputError):
            landmark_loss(obs, pred, sigma=np.array([0.01, -0.01, 0.01]))


class TestTotalLoss:
    def test_matches_packed_evaluation(self, small_instance):
        problem = problem_from_instance(small_instance)
        inst = small_instance
        from undistort.facemodel import FaceLatent

        n = problem.observed.n
        latent = FaceLatent(w=inst.true_latent.w, residual=np.zeros((n, 3)))
        sigmas = np.full(n, 0.004)
        direct = total_loss(problem, inst.true_cam, latent, sigmas)
        params = OptParams.from_state(inst.true_cam, latent, sigmas)
        packed, _ = loss_and_gradient(problem, params)
        assert direct.total == pytest.approx(packed.total, rel=1e-12)

    def test_true_state_fits_noiseless_data(self, small_instance):
        # With zero noise the quadratic data term at the truth is ~0; the
        # total is then dominated by the deterministic log-sigma part.
        problem = problem_from_instance(small_instance)
        inst = small_instance
        from undistort.facemodel import FaceLatent

        n = problem.observed.n
        latent = FaceLatent(w=inst.true_latent.w, residual=np.zeros((n, 3)))
        out = total_loss(problem, inst.true_cam, latent, np.full(n, 0.004))
        assert out.landmark < 1e-16
