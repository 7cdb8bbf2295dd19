"""Staged inversion of camera pose, distance/focal coupling, and face shape.

The schedule runs three stages over one packed parameter vector:

1. camera: distance knob, pose (rotation, lateral translation), and the
   focal trim gamma, with the face latent frozen;
2. joint: camera parameters together with the deformation coefficients
   and the per-landmark log-uncertainties;
3. refine: the unconstrained per-landmark residual field only, with a
   monotonicity guard and an early stop.

Initialization fits a weak-perspective rigid alignment of the model mean
shape to the observed landmarks, lifts it to a pinhole pose under an
assumed focal length, optionally dollies the camera to a close working
distance, and re-references the distance/focal coupling there so the
distance knob starts at 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateDistance,
    DimensionMismatch,
    InfeasibleRender,
    InitializationFailed,
    InputError,
)
from .facemodel import FaceLatent, eye_midpoint, shape
from .geometry import (
    ALPHA_MAX,
    ALPHA_MIN,
    CameraState,
    ReparamAnchor,
    Rotation,
    Z_MIN,
    rebase_anchor,
    set_distance,
)
from .landmarks import LandmarkSet
from .objective import (
    IDX_DTZ,
    IDX_GAMMA,
    LossBreakdown,
    N_CAMERA_PARAMS,
    OptParams,
    _evaluate as _objective_evaluate,
    loss_and_gradient,
)

ABLATION_VARIANTS = ("full", "no_reparam", "no_near_init", "no_schedule",
                     "no_all")


@dataclass(frozen=True)
class ScheduleConfig:
    """All optimization knobs, with the published defaults."""

    cam_only_iters: int = 300
    joint_iters_end: int = 700
    refine_max_iters: int = 300
    lr_cam: float = 5e-3
    lr_face: float = 1e-2
    lr_refine: float = 3e-4
    pose_lr_scale: float = 0.1
    gamma_lr_scale: float = 0.01
    eps_init: float = 0.25
    early_stop_delta: float = 1e-6
    early_stop_window: int = 20
    lambda_res: float = 10.0
    lambda_w: float = 1e-3
    sigma_floor: float = 1e-3
    w_max: float = 4.0
    delta_tz_min: float = 1e-6
    t_z_min: float = 1e-3
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    z_min: float = Z_MIN
    penalty: float = 1e6
    init_f35: float = 160.0
    init_residual_max: float = 0.25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    no_reparam: bool = False
    no_near_init: bool = False
    no_schedule: bool = False


def ablation_config(base, variant):
    """Config for one named ablation variant of the standard grid."""
    if variant not in ABLATION_VARIANTS:
        raise InputError(
            f"unknown ablation variant {variant!r}; choose from "
            f"{ABLATION_VARIANTS}")
    if variant == "full":
        return replace(base, no_reparam=False, no_near_init=False,
                       no_schedule=False)
    if variant == "no_all":
        return replace(base, no_reparam=True, no_near_init=True,
                       no_schedule=True)
    return replace(base, **{variant: True})


@dataclass(eq=False)
class InversionProblem:
    """Observed landmarks plus the model and configuration to invert them."""

    observed: LandmarkSet
    model: object
    width: int
    height: int
    config: ScheduleConfig = field(default_factory=ScheduleConfig)
    init_camera: CameraState = None

    def __post_init__(self):
        if self.observed.n != self.model.n_landmarks:
            raise DimensionMismatch(
                f"observed {self.observed.n} landmarks but model has "
                f"{self.model.n_landmarks}")
        if self.width <= 0 or self.height <= 0:
            raise DimensionMismatch(
                f"image size must be positive, got {self.width}x{self.height}")


@dataclass(eq=False)
class InversionSolution:
    """Result of :func:`solve`.

    ``distance`` is the recovered camera-to-anchor distance, i.e.
    ``cam.distance`` (alpha * d0 of the returned state).
    """

    cam: CameraState
    latent: FaceLatent
    sigmas: np.ndarray
    distance: float
    loss_trace: list
    stages: dict
    init_info: dict
    config: ScheduleConfig


class Adam:
    """Adaptive-moment step for one parameter group."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, grad):
        """Return the update to subtract for this gradient."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(eq=False)
class SolveState:
    """Mutable optimization state threaded through the stages."""

    params: OptParams
    adams: dict
    iteration: int = 0
    trace: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    init_info: dict = field(default_factory=dict)
    refine_scale: float = 1.0


def _group_slices(params):
    k = params.latent_dim
    return {
        "distance": slice(IDX_DTZ, IDX_DTZ + 1),
        "pose": slice(1, 6),  # t_x, t_y, axis-angle
        "gamma": slice(IDX_GAMMA, IDX_GAMMA + 1),
        "w": params.sl_w,
        "log_sigma": params.sl_log_sigma,
        "residual": params.sl_residual,
    }


def _make_adams(params, cfg):
    sl = _group_slices(params)
    rates = {
        "distance": cfg.lr_cam,
        "pose": cfg.pose_lr_scale * cfg.lr_cam,
        "gamma": cfg.gamma_lr_scale * cfg.lr_cam,
        "w": cfg.lr_face,
        "log_sigma": cfg.lr_face,
        "residual": cfg.lr_refine,
    }
    return {
        name: Adam(sl[name].stop - sl[name].start, rates[name],
                   cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        for name in sl
    }


def _distance_knob_bounds(params, cfg):
    """Clamp range for slot 0 keeping alpha within its configured band."""
    if not params.reparam:
        return cfg.t_z_min, math.inf
    # t_z is increasing in alpha; delta_tz = (t_z0 / t_z)^2 is decreasing.
    t_at_max = params.t_z0 + params.d0 * (cfg.alpha_max - 1.0)
    lo = max(cfg.delta_tz_min, (params.t_z0 / t_at_max) ** 2)
    t_at_min = params.t_z0 + params.d0 * (cfg.alpha_min - 1.0)
    hi = (params.t_z0 / t_at_min) ** 2 if t_at_min > 0.0 else math.inf
    return lo, hi


def _project_params(params, cfg, groups):
    x = params.x
    if "distance" in groups:
        lo, hi = _distance_knob_bounds(params, cfg)
        x[IDX_DTZ] = min(max(x[IDX_DTZ], lo), hi)
    if "w" in groups:
        np.clip(x[params.sl_w], -cfg.w_max, cfg.w_max, out=x[params.sl_w])
    if "log_sigma" in groups:
        floor = math.log(cfg.sigma_floor)
        np.maximum(x[params.sl_log_sigma], floor, out=x[params.sl_log_sigma])


def _evaluate_step(problem, state):
    """Loss and gradient with infeasible states mapped to a flat penalty."""
    cfg = problem.config
    try:
        return loss_and_gradient(problem, state.params)
    except InfeasibleRender:
        penalty = LossBreakdown(0.0, 0.0, 0.0, 0.0, cfg.penalty)
        return penalty, np.zeros_like(state.params.x)


def _evaluate_value(problem, state):
    """Loss only, with the same infeasible-state penalty mapping."""
    cfg = problem.config
    try:
        breakdown, _ = _objective_evaluate(problem, state.params,
                                           want_grad=False)
        return breakdown
    except InfeasibleRender:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, cfg.penalty)


def _step_once(problem, state, groups):
    breakdown, grad = _evaluate_step(problem, state)
    state.trace.append(breakdown)
    sl = _group_slices(state.params)
    for name in groups:
        s = sl[name]
        state.params.x[s] -= state.adams[name].step(grad[s])
    _project_params(state.params, problem.config, groups)
    state.iteration += 1
    return breakdown


def _rigid_alignment(observed, model, width, height, cfg):
    """Weak-perspective similarity fit of the mean shape to the detections.

    Returns (rotation matrix, scale px/m, mean-shape centroid used,
    observed centroid px, normalized RMS residual).
    """
    vis = observed.visibility
    if int(np.sum(vis)) < 4:
        raise InitializationFailed(
            f"need at least 4 visible landmarks, got {int(np.sum(vis))}")
    obs_px = observed.to_pixels(width, height)[vis]
    pts = model.mean_shape[vis]
    obs_c = obs_px.mean(axis=0)
    pts_c = pts.mean(axis=0)
    a_obs = obs_px - obs_c
    a_pts = pts - pts_c
    # Least-squares 2x3 affine camera, then its nearest scaled orthographic
    # factorization via SVD.
    sol, _, rank, _ = np.linalg.lstsq(a_pts, a_obs, rcond=None)
    affine = sol.T  # 2x3
    u, sing, vt = np.linalg.svd(affine, full_matrices=False)
    if rank < 3 or sing[1] < 1e-12 * max(sing[0], 1.0):
        raise InitializationFailed("landmark configuration is degenerate")
    rows = u @ vt
    scale = float(sing.mean())
    if scale <= 0.0:
        raise InitializationFailed("weak-perspective scale collapsed to zero")
    rot = np.vstack([rows, np.cross(rows[0], rows[1])])
    pred = scale * (a_pts @ rows.T)
    rms_px = float(np.sqrt(np.mean(np.sum((pred - a_obs) ** 2, axis=1))))
    rms_norm = rms_px / float(max(width, height))
    if rms_norm > cfg.init_residual_max:
        raise InitializationFailed(
            f"rigid alignment residual {rms_norm:.4f} exceeds "
            f"{cfg.init_residual_max} (normalized)")
    return rot, scale, pts_c, obs_c, rms_norm


def _lift_to_pinhole(rot, scale, pts_c, obs_c, model, width, height, cfg):
    """Turn the weak-perspective fit into a coupled pinhole camera state."""
    f0 = cfg.init_f35 * float(width) / 36.0
    d0 = f0 / scale
    anchor_w = eye_midpoint(model)
    anchor_cam_z = float((rot @ anchor_w)[2])
    t_z0 = d0 - anchor_cam_z
    if t_z0 <= 0.0:
        raise InitializationFailed(
            f"lifted camera sits inside the subject (t_z0={t_z0:.4g})")
    cx = float(width) / 2.0
    cy = float(height) / 2.0
    anchor_px = scale * (rot[:2] @ (anchor_w - pts_c)) + obs_c
    t_x = (anchor_px[0] - cx) * d0 / f0 - float((rot @ anchor_w)[0])
    t_y = (anchor_px[1] - cy) * d0 / f0 - float((rot @ anchor_w)[1])
    return CameraState.assemble(
        Rotation.from_matrix(rot), t_x, t_y, ReparamAnchor(t_z0, d0, 1.0),
        f0, 1.0, cx, cy, width, height)


def initialize(problem):
    """Build the starting optimization state for :func:`solve`.

    Rigid-aligns the mean shape, dollies to the configured close working
    distance with the focal following the coupling, and re-references the
    coupling at the reached pose so the distance knob starts at exactly 1.
    The latent starts at zero and the log-uncertainties at the detector
    values.

    A problem that supplies ``init_camera`` opts out of the alignment
    heuristic entirely: optimization starts at exactly that state (callers
    who want the close-distance warm start can dolly before passing it).

    Raises:
        InitializationFailed: if the rigid alignment residual exceeds the
            configured bound or the configuration is degenerate.
    """
    cfg = problem.config
    model = problem.model
    if problem.observed.n != model.n_landmarks:
        raise DimensionMismatch(
            f"observed {problem.observed.n} landmarks but model has "
            f"{model.n_landmarks}")
    supplied = problem.init_camera is not None
    if supplied:
        cam = problem.init_camera
        align_residual = None
    else:
        rot, scale, pts_c, obs_c, align_residual = _rigid_alignment(
            problem.observed, model, problem.width, problem.height, cfg)
        cam = _lift_to_pinhole(rot, scale, pts_c, obs_c, model,
                               problem.width, problem.height, cfg)
    init_info = {
        "d0": cam.anchor.d0,
        "t_z0": cam.anchor.t_z0,
        "f0_px": cam.intrinsics.f0,
        "align_residual": align_residual,
    }

    if cfg.no_reparam:
        t_z_start = float(cam.extrinsics.translation[2])
        if not cfg.no_near_init and not supplied:
            # Dolly the geometry to the working distance; the focal cannot
            # follow because the coupling is disabled.
            t_z_start = cam.anchor.t_z0 - cam.anchor.d0 + cfg.eps_init
            t_z_start = max(t_z_start, cfg.t_z_min)
        n = model.n_landmarks
        k = model.latent_dim
        x = np.zeros(N_CAMERA_PARAMS + k + 4 * n)
        x[IDX_DTZ] = t_z_start
        x[1] = cam.extrinsics.translation[0]
        x[2] = cam.extrinsics.translation[1]
        x[3:6] = cam.extrinsics.rotation.axis_angle
        x[IDX_GAMMA] = cam.intrinsics.gamma
        x[N_CAMERA_PARAMS + k + 3 * n:] = np.log(
            np.clip(problem.observed.sigma, cfg.sigma_floor, None))
        params = OptParams(
            x, n, k, False, cam.anchor.t_z0, cam.anchor.d0,
            cam.intrinsics.f0, cam.intrinsics.cx, cam.intrinsics.cy,
            cam.intrinsics.width, cam.intrinsics.height)
    else:
        if not cfg.no_near_init and not supplied:
            try:
                cam = set_distance(cam, cfg.eps_init)
            except DegenerateDistance as exc:
                raise InitializationFailed(
                    f"cannot dolly to eps_init={cfg.eps_init}: {exc}") from exc
        if cam.anchor.delta_tz != 1.0 or cam.anchor.d0 != cam.distance:
            # Skip the re-reference when it is already the identity, so a
            # supplied starting camera survives bit-for-bit.
            cam = rebase_anchor(cam, cam.distance)
        latent = FaceLatent.zeros(model)
        sigmas = np.clip(problem.observed.sigma, cfg.sigma_floor, None)
        params = OptParams.from_state(cam, latent, sigmas)

    state = SolveState(params, _make_adams(params, cfg))
    state.init_info = init_info
    return state


def run_stage_camera(problem, state):
    """Camera-only stage: distance knob, pose, gamma; face frozen."""
    cfg = problem.config
    start = state.iteration
    while state.iteration < cfg.cam_only_iters:
        _step_once(problem, state, ("distance", "pose", "gamma"))
    state.stages["camera"] = (start, state.iteration)
    return state


def run_stage_joint(problem, state):
    """Joint stage: camera parameters plus w and log-sigma."""
    cfg = problem.config
    start = state.iteration
    while state.iteration < cfg.joint_iters_end:
        _step_once(problem, state,
                   ("distance", "pose", "gamma", "w", "log_sigma"))
    state.stages["joint"] = (start, state.iteration)
    return state


def run_stage_refine(problem, state):
    """Residual-only refinement with a monotonicity guard and early stop.

    Each accepted step cannot increase the loss: a step that would is
    reverted and retried at half scale, so the cumulative increase across
    the stage is exactly zero.
    """
    cfg = problem.config
    start = state.iteration
    sl = state.params.sl_residual
    adam = state.adams["residual"]
    totals = []
    steps = 0
    while steps < cfg.refine_max_iters:
        breakdown, grad = _evaluate_step(problem, state)
        state.trace.append(breakdown)
        totals.append(breakdown.total)
        state.iteration += 1
        steps += 1
        if (len(totals) > cfg.early_stop_window
                and totals[-1 - cfg.early_stop_window] - totals[-1]
                < cfg.early_stop_delta):
            break
        before = state.params.x[sl].copy()
        state.params.x[sl] -= state.refine_scale * adam.step(grad[sl])
        after = _evaluate_value(problem, state)
        if after.total > breakdown.total:
            state.params.x[sl] = before
            state.refine_scale *= 0.5
            if state.refine_scale < 1e-6:
                break
    state.stages["refine"] = (start, state.iteration)
    return state


def _final_camera(problem, params):
    """CameraState for the finished parameters.

    With the coupling disabled the solved t_z has no anchor attached, so
    the state is re-referenced at the physical camera-to-anchor distance
    of the final pose (alpha = 1, focal unchanged).
    """
    x = params.x
    rotation = Rotation(x[3:6].copy())
    gamma = float(x[IDX_GAMMA])
    if params.reparam:
        anchor = ReparamAnchor(params.t_z0, params.d0, float(x[IDX_DTZ]))
        return CameraState.assemble(
            rotation, float(x[1]), float(x[2]), anchor, params.f0, gamma,
            params.cx, params.cy, params.width, params.height)
    t_z = float(x[IDX_DTZ])
    latent = FaceLatent(params.w.copy(), params.residual.copy())
    anchor_w = eye_midpoint(problem.model, latent)
    d_phys = float((rotation.matrix() @ anchor_w)[2]) + t_z
    if d_phys <= 0.0:
        raise InfeasibleRender(
            f"final anchor distance {d_phys:.4g} is not positive")
    return CameraState.assemble(
        rotation, float(x[1]), float(x[2]), ReparamAnchor(t_z, d_phys, 1.0),
        params.f0, gamma, params.cx, params.cy, params.width, params.height)


def solve(problem):
    """Run the full staged inversion and package the result."""
    cfg = problem.config
    state = initialize(problem)
    if not cfg.no_schedule:
        state = run_stage_camera(problem, state)
    state = run_stage_joint(problem, state)
    state = run_stage_refine(problem, state)
    final, _ = _evaluate_step(problem, state)
    state.trace.append(final)

    params = state.params
    cam = _final_camera(problem, params)
    latent = FaceLatent(params.w.copy(), params.residual.copy())
    return InversionSolution(
        cam=cam,
        latent=latent,
        sigmas=params.sigmas.copy(),
        distance=cam.distance,
        loss_trace=state.trace,
        stages=dict(state.stages),
        init_info=dict(state.init_info),
        config=cfg,
    )
