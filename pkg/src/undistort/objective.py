"""Inversion objective: uncertainty-weighted landmark loss and its gradient.

The data term over visible landmarks i is

    sum_i [ log(sigma_i^2) + ||m_i - m'_i||^2 / (2 sigma_i^2) ]

with m' the rendered landmark and m the observation, both in normalized
image coordinates, and sigma_i a per-landmark uncertainty optimized in
log-space.  The total objective adds lambda_res * ||residual||^2 and
lambda_w * ||w||^2.

The free parameters are packed into one flat vector
    [delta_tz | t_x t_y | axis-angle (3) | gamma | w (K) |
     residual (3N) | log sigma (N)]
(slot 0 holds t_z directly when the focal coupling is disabled).  The
gradient is assembled analytically by chain rule; a central-difference
oracle over the same packing backs it in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import math
import numpy as np

from .errors import (
    DimensionMismatch,
    InfeasibleRender,
    InputError,
    NonFiniteGradient,
)
from .geometry import rotation_matrix, so3_right_jacobian

IDX_DTZ = 0
IDX_TX = 1
IDX_TY = 2
SL_ROT = slice(3, 6)
IDX_GAMMA = 6
N_CAMERA_PARAMS = 7


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted loss parts plus the weighted total.

    ``landmark`` is the quadratic data term, ``sigma_log`` the log-variance
    term; their sum is the uncertainty-weighted landmark loss.  The
    regularizer parts are stored raw; ``total`` already applies the
    configured weights.
    """

    landmark: float
    sigma_log: float
    residual_reg: float
    latent_reg: float
    total: float

    def as_dict(self):
        return {
            "landmark": self.landmark,
            "sigma_log": self.sigma_log,
            "residual_reg": self.residual_reg,
            "latent_reg": self.latent_reg,
            "total": self.total,
        }


@dataclass(eq=False)
class OptParams:
    """Flat parameter vector plus the fixed camera context it refers to.

    Attributes:
        x: packed parameter vector, float64.
        n_landmarks / latent_dim: layout sizes.
        reparam: when True, slot 0 is delta_tz and the focal follows
            gamma * alpha * f0; when False slot 0 is t_z and alpha == 1.
        t_z0, d0: coupling reference (ignored for the focal when
            reparam=False, but kept for bookkeeping).
        f0, cx, cy, width, height: fixed intrinsics context.
    """

    x: np.ndarray
    n_landmarks: int
    latent_dim: int
    reparam: bool
    t_z0: float
    d0: float
    f0: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        expect = N_CAMERA_PARAMS + self.latent_dim + 4 * self.n_landmarks
        if x.shape != (expect,):
            raise DimensionMismatch(
                f"packed vector must have shape ({expect},), got {x.shape}")
        self.x = x

    # --- layout -----------------------------------------------------------
    @property
    def sl_w(self):
        return slice(N_CAMERA_PARAMS, N_CAMERA_PARAMS + self.latent_dim)

    @property
    def sl_residual(self):
        lo = N_CAMERA_PARAMS + self.latent_dim
        return slice(lo, lo + 3 * self.n_landmarks)

    @property
    def sl_log_sigma(self):
        lo = N_CAMERA_PARAMS + self.latent_dim + 3 * self.n_landmarks
        return slice(lo, lo + self.n_landmarks)

    # --- views ------------------------------------------------------------
    @property
    def w(self):
        return self.x[self.sl_w]

    @property
    def residual(self):
        return self.x[self.sl_residual].reshape(self.n_landmarks, 3)

    @property
    def log_sigma(self):
        return self.x[self.sl_log_sigma]

    @property
    def sigmas(self):
        return np.exp(self.log_sigma)

    def with_x(self, x):
        return replace(self, x=np.array(x, dtype=float))

    def copy(self):
        return self.with_x(self.x)

    @classmethod
    def from_state(cls, cam, latent, sigmas):
        """Pack a coupled CameraState + latent + sigmas (reparam layout)."""
        n = latent.residual.shape[0] if latent.residual is not None else None
        sig = np.asarray(sigmas, dtype=float)
        if n is None:
            n = sig.shape[0]
        x = np.zeros(N_CAMERA_PARAMS + latent.w.shape[0] + 4 * n)
        x[IDX_DTZ] = cam.anchor.delta_tz
        x[IDX_TX] = cam.extrinsics.translation[0]
        x[IDX_TY] = cam.extrinsics.translation[1]
        x[SL_ROT] = cam.extrinsics.rotation.axis_angle
        x[IDX_GAMMA] = cam.intrinsics.gamma
        x[N_CAMERA_PARAMS:N_CAMERA_PARAMS + latent.w.shape[0]] = latent.w
        lo = N_CAMERA_PARAMS + latent.w.shape[0]
        if latent.residual is not None:
            x[lo:lo + 3 * n] = latent.residual.ravel()
        x[lo + 3 * n:] = np.log(sig)
        return cls(
            x, n, latent.w.shape[0], True,
            cam.anchor.t_z0, cam.anchor.d0,
            cam.intrinsics.f0, cam.intrinsics.cx, cam.intrinsics.cy,
            cam.intrinsics.width, cam.intrinsics.height)


def landmark_loss(observed, predicted, sigma=None):
    """Uncertainty-weighted landmark data term.

    Args:
        observed: LandmarkSet of detections (its visibility gates terms).
        predicted: LandmarkSet rendered from the current state.
        sigma: per-landmark uncertainties to use; defaults to
            observed.sigma (the detector values double as initialization).

    Returns:
        LossBreakdown with only the landmark/sigma_log parts populated;
        total is their sum.
    """
    if observed.n != predicted.n:
        raise DimensionMismatch(
            f"landmark counts differ: {observed.n} vs {predicted.n}")
    sig = observed.sigma if sigma is None else np.asarray(sigma, dtype=float)
    if sig.shape != (observed.n,):
        raise DimensionMismatch(
            f"sigma must have shape ({observed.n},), got {sig.shape}")
    if not np.all(sig > 0.0):
        raise InputError("sigma must be positive")
    vis = observed.visibility & predicted.visibility
    diff = predicted.points - observed.points
    quad = np.sum(diff * diff, axis=1) / (2.0 * sig * sig)
    landmark = float(np.sum(quad[vis]))
    sigma_log = float(np.sum(2.0 * np.log(sig[vis])))
    return LossBreakdown(landmark, sigma_log, 0.0, 0.0, landmark + sigma_log)


def _camera_pieces(params):
    """delta_tz-slot decoding shared by value and gradient paths."""
    x = params.x
    if params.reparam:
        delta = float(x[IDX_DTZ])
        if not (delta > 0.0) or not math.isfinite(delta):
            raise InfeasibleRender(f"delta_tz={delta!r} is not positive")
        t_z = params.t_z0 / math.sqrt(delta)
        alpha = (params.d0 - (params.t_z0 - t_z)) / params.d0
        if not (alpha > 0.0):
            raise InfeasibleRender(
                f"alpha={alpha:.6g} not positive (camera crossed the subject)")
    else:
        delta = None
        t_z = float(x[IDX_DTZ])
        alpha = 1.0
    gamma = float(x[IDX_GAMMA])
    f = gamma * alpha * params.f0
    if not (f > 0.0):
        raise InfeasibleRender(f"effective focal {f:.6g} not positive")
    return delta, t_z, alpha, gamma, f


def _evaluate(problem, params, want_grad, z_min=None):
    model = problem.model
    obs = problem.observed
    cfg = problem.config
    if z_min is None:
        z_min = cfg.z_min
    n = params.n_landmarks
    k = params.latent_dim
    if model.n_landmarks != n or model.latent_dim != k:
        raise DimensionMismatch("packed layout does not match the model")

    x = params.x
    delta, t_z, alpha, gamma, f = _camera_pieces(params)
    aa = x[SL_ROT]
    rot = rotation_matrix(aa)
    w = x[params.sl_w]
    res = x[params.sl_residual].reshape(n, 3)
    log_sig = x[params.sl_log_sigma]

    pts = model.mean_shape + np.tensordot(w, model.basis, axes=1) + res
    p_cam = pts @ rot.T
    p_cam[:, 0] += x[IDX_TX]
    p_cam[:, 1] += x[IDX_TY]
    p_cam[:, 2] += t_z
    z = p_cam[:, 2]
    if np.any(z <= z_min):
        idx = int(np.argmax(z <= z_min))
        raise InfeasibleRender(
            f"landmark {idx} at depth {z[idx]:.6g} <= z_min={z_min:.6g}")

    width = float(params.width)
    height = float(params.height)
    # Divide rather than multiply by a reciprocal: bit-identical to the
    # rendering path, so an observation generated at these exact parameters
    # yields an exactly zero data gradient (truth stays a fixed point).
    pred_u = (f * p_cam[:, 0] / z + params.cx) / width
    pred_v = (f * p_cam[:, 1] / z + params.cy) / height
    diff = np.stack([pred_u, pred_v], axis=1) - obs.points
    vis = obs.visibility
    sig2 = np.exp(2.0 * log_sig)
    quad = np.sum(diff * diff, axis=1) / (2.0 * sig2)
    landmark = float(np.sum(quad[vis]))
    sigma_log = float(np.sum(2.0 * log_sig[vis]))
    residual_reg = float(np.sum(res * res))
    latent_reg = float(np.sum(w * w))
    total = (landmark + sigma_log + cfg.lambda_res * residual_reg
             + cfg.lambda_w * latent_reg)
    breakdown = LossBreakdown(landmark, sigma_log, residual_reg, latent_reg,
                              total)
    if not want_grad:
        return breakdown, None

    grad = np.zeros_like(x)
    inv_z = 1.0 / z
    g_uv = np.where(vis[:, None], diff, 0.0) / sig2[:, None]
    g_u = g_uv[:, 0] / width
    g_v = g_uv[:, 1] / height
    # dL/dp_cam
    g_p = np.empty((n, 3))
    g_p[:, 0] = g_u * f * inv_z
    g_p[:, 1] = g_v * f * inv_z
    radial = g_u * p_cam[:, 0] + g_v * p_cam[:, 1]
    g_p[:, 2] = -radial * f * inv_z * inv_z
    d_l_d_f = float(np.sum(radial * inv_z))

    grad[IDX_TX] = np.sum(g_p[:, 0])
    grad[IDX_TY] = np.sum(g_p[:, 1])
    d_l_d_tz = float(np.sum(g_p[:, 2]))
    if params.reparam:
        # f depends on t_z through alpha; t_z depends on delta_tz.
        d_l_d_tz += d_l_d_f * gamma * params.f0 / params.d0
        grad[IDX_DTZ] = d_l_d_tz * (-0.5 * params.t_z0 * delta ** -1.5)
    else:
        grad[IDX_DTZ] = d_l_d_tz
    grad[IDX_GAMMA] = d_l_d_f * alpha * params.f0

    g_shape = g_p @ rot  # row i is R^T @ g_p[i]
    grad[SL_ROT] = so3_right_jacobian(aa).T @ np.sum(
        np.cross(pts, g_shape), axis=0)
    basis_flat = model.basis.reshape(k, -1)
    grad[params.sl_w] = basis_flat @ g_shape.ravel() + 2.0 * cfg.lambda_w * w
    grad[params.sl_residual] = (g_shape + 2.0 * cfg.lambda_res * res).ravel()
    grad[params.sl_log_sigma] = np.where(
        vis, 2.0 - np.sum(diff * diff, axis=1) / sig2, 0.0)
    return breakdown, grad


def total_loss(problem, cam, latent, sigmas):
    """Full objective value for a typed state.

    Raises:
        InfeasibleRender: when the state cannot be rendered (geometry at
            or behind the near plane, non-positive focal).
    """
    params = OptParams.from_state(cam, latent, sigmas)
    breakdown, _ = _evaluate(problem, params, want_grad=False)
    return breakdown


def loss_and_gradient(problem, params):
    """Objective value and analytic gradient in one pass."""
    breakdown, grad = _evaluate(problem, params, want_grad=True)
    if not np.all(np.isfinite(grad)):
        bad = int(np.argmax(~np.isfinite(grad)))
        raise NonFiniteGradient(f"gradient coordinate {bad} is not finite")
    return breakdown, grad


def gradient(problem, params):
    """Analytic gradient of the total objective w.r.t. the packed vector."""
    return loss_and_gradient(problem, params)[1]


def central_difference(fn, x, h=1e-6):
    """Generic central-difference gradient of a scalar function.

    Steps are relative: h_i = h * max(1, |x_i|).

    Raises:
        InputError: if h is not strictly positive.
    """
    if not (h > 0.0):
        raise InputError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * step)
    return grad


def fd_gradient_oracle(problem, params, h=1e-6):
    """Central-difference gradient over the packed vector (testing oracle).

    Kept out of every production call path; solver code never calls it.
    """

    def value(vec):
        breakdown, _ = _evaluate(problem, params.with_x(vec), want_grad=False)
        return breakdown.total

    return central_difference(value, params.x, h)
