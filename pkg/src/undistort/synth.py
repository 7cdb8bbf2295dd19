"""Seeded synthetic instances with known camera, distance, and shape.

Every instance is generated from one integer seed: the same seed (and
spec) reproduces the instance bit for bit.  A suite shares one model and
varies latent, camera, and noise across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, InputError, MissingLabels
from .facemodel import FaceLatent, eye_midpoint, render_landmarks, shape, \
    synthesize_model
from .geometry import CameraState, ReparamAnchor, Rotation, rotation_matrix
from .landmarks import LandmarkSet
from .solver import InversionProblem, ScheduleConfig


@dataclass(frozen=True)
class SynthSpec:
    """Ranges and sizes for instance generation."""

    n_landmarks: int = 468
    latent_dim: int = 32
    width: int = 512
    height: int = 512
    d_range: tuple = (0.25, 0.7)
    f35_range: tuple = (20.0, 35.0)
    noise_sigma: float = 0.0
    rot_jitter_deg: float = 10.0
    center_jitter: float = 0.02
    w_limit: float = 2.0
    model_seed: int = 0

    def __post_init__(self):
        if self.d_range[0] <= 0.0 or self.d_range[1] < self.d_range[0]:
            raise InputError(f"invalid distance range {self.d_range}")
        if self.f35_range[0] <= 0.0 or self.f35_range[1] < self.f35_range[0]:
            raise InputError(f"invalid focal range {self.f35_range}")
        if self.noise_sigma < 0.0:
            raise InputError(f"noise sigma must be >= 0, got {self.noise_sigma}")


@dataclass(eq=False)
class SyntheticInstance:
    """Ground truth plus the observation derived from it.

    ``observed.points == clean.points + noise`` exactly; subtracting the
    stored noise recovers the noiseless projection bit for bit.
    """

    seed: int
    spec: SynthSpec
    model: object
    true_latent: FaceLatent
    true_cam: CameraState
    true_distance: float
    true_f_px: float
    true_f35: float
    clean: LandmarkSet
    observed: LandmarkSet
    noise: np.ndarray


def _truncated_normal(rng, size, limit):
    """Standard normal draws, redrawing any sample outside [-limit, limit]."""
    out = rng.normal(size=size)
    for _ in range(1000):
        bad = np.abs(out) > limit
        if not np.any(bad):
            return out
        out[bad] = rng.normal(size=int(np.sum(bad)))
    raise DegenerateConfiguration("truncated normal rejection did not finish")


def generate(seed, spec=SynthSpec(), model=None):
    """Build one synthetic instance.

    Args:
        seed: instance seed; draw order is fixed, so results are
            bit-reproducible per (seed, spec).
        spec: generation ranges.
        model: shared FaceModel; synthesized from spec.model_seed when
            omitted.

    Returns:
        SyntheticInstance whose observed landmarks all fall inside the
        image; the anchor placement jitter is re-drawn (deterministically)
        when a draw would push landmarks off frame.
    """
    if model is None:
        model = synthesize_model(spec.model_seed, spec.n_landmarks,
                                 spec.latent_dim)
    rng = np.random.default_rng(seed)
    w = _truncated_normal(rng, model.latent_dim, spec.w_limit)
    latent = FaceLatent(w, np.zeros((model.n_landmarks, 3)))
    distance = float(rng.uniform(*spec.d_range))
    f35 = float(rng.uniform(*spec.f35_range))
    f_px = f35 * float(spec.width) / 36.0
    jitter = np.deg2rad(spec.rot_jitter_deg)
    axis_angle = rng.uniform(-jitter, jitter, size=3)

    pts = shape(model, latent)
    anchor_w = 0.5 * (pts[model.eye_indices[0]] + pts[model.eye_indices[1]])
    rot = rotation_matrix(axis_angle)
    anchor_cam = rot @ anchor_w
    cx = float(spec.width) / 2.0
    cy = float(spec.height) / 2.0

    cam = None
    clean = None
    for _ in range(100):
        jx, jy = rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
        u_t = cx + jx * spec.width
        v_t = cy + jy * spec.height
        t_z = distance - float(anchor_cam[2])
        t_x = (u_t - cx) * distance / f_px - float(anchor_cam[0])
        t_y = (v_t - cy) * distance / f_px - float(anchor_cam[1])
        cam = CameraState.assemble(
            Rotation(axis_angle), t_x, t_y,
            ReparamAnchor(t_z, distance, 1.0),
            f_px, 1.0, cx, cy, spec.width, spec.height)
        clean = render_landmarks(model, latent, cam)
        inside = np.all((clean.points > 0.01) & (clean.points < 0.99))
        if inside:
            break
    else:
        raise DegenerateConfiguration(
            f"seed {seed}: could not place all landmarks in frame")

    if spec.noise_sigma > 0.0:
        noise = rng.normal(0.0, spec.noise_sigma,
                           size=(model.n_landmarks, 2))
    else:
        noise = np.zeros((model.n_landmarks, 2))
    detector_sigma = max(spec.noise_sigma, 0.01)
    observed = LandmarkSet(clean.points + noise,
                           np.ones(model.n_landmarks, dtype=bool),
                           np.full(model.n_landmarks, detector_sigma))
    return SyntheticInstance(
        seed=seed, spec=spec, model=model, true_latent=latent, true_cam=cam,
        true_distance=distance, true_f_px=f_px, true_f35=f35,
        clean=clean, observed=observed, noise=noise)


def make_suite(count, base_seed=0, spec=SynthSpec(), model=None):
    """Generate ``count`` instances sharing one model, seeds base_seed+i."""
    if model is None:
        model = synthesize_model(spec.model_seed, spec.n_landmarks,
                                 spec.latent_dim)
    return [generate(base_seed + i, spec, model) for i in range(count)]


def problem_from_instance(instance, config=None):
    """Wrap an instance's observation as an InversionProblem."""
    return InversionProblem(
        observed=instance.observed,
        model=instance.model,
        width=instance.spec.width,
        height=instance.spec.height,
        config=config if config is not None else ScheduleConfig(),
    )


def _span(points, labels, name_a, name_b):
    try:
        ia = labels.index(name_a)
        ib = labels.index(name_b)
    except ValueError as exc:
        raise MissingLabels(
            f"labels must include {name_a!r} and {name_b!r}") from exc
    return float(np.linalg.norm(points[ia] - points[ib]))


def distortion_score(lm_near, lm_far, labels):
    """Perspective distortion measure between two renders of one face.

    Compares the nose-width to interocular-width ratio of the near set
    against the far set: score = ratio_near / ratio_far - 1.  Positive
    scores mean the near view magnifies the nose relative to the eyes,
    which is the close-range perspective signature; the score grows as
    the near distance shrinks.

    Raises:
        MissingLabels: if the eye/nose side labels are absent.
        DegenerateConfiguration: if any span is zero.
    """
    if len(labels) != lm_near.n or lm_near.n != lm_far.n:
        raise MissingLabels(
            f"label count {len(labels)} must match landmark count "
            f"{lm_near.n}/{lm_far.n}")
    spans = {}
    for tag, lm in (("near", lm_near), ("far", lm_far)):
        nose = _span(lm.points, labels, "nose_left", "nose_right")
        eyes = _span(lm.points, labels, "eye_left", "eye_right")
        if nose <= 0.0 or eyes <= 0.0:
            raise DegenerateConfiguration(
                f"{tag} set has a zero nose or eye span")
        spans[tag] = nose / eyes
    return spans["near"] / spans["far"] - 1.0


# ---------------------------------------------------------------------------
# Synthetic scene rendering (preview images and depth for the full pipeline)

# Background plane position behind the anchor, meters (world +z).
_SCENE_BG_Z = 1.0
# Checker square size on the background plane, meters.
_SCENE_CHECKER = 0.2


def fit_ellipsoid_axes(model):
    """Approximate head half-axes (a_x, a_y, depth) from designated landmarks.

    Uses the construction conventions of :func:`synthesize_model`: the ears
    sit at +-a_x, the chin at 0.92 * a_y, and the nose apex at depth -c.
    Good enough for preview rendering; not used by the optimizer.
    """
    labels = list(model.labels)
    try:
        ear_l = model.mean_shape[labels.index("ear_left")]
        ear_r = model.mean_shape[labels.index("ear_right")]
        chin = model.mean_shape[labels.index("chin")]
        nose = model.mean_shape[labels.index("nose_apex")]
    except ValueError as exc:
        raise MissingLabels(f"model lacks a designated landmark: {exc}") from None
    a_x = 0.5 * abs(ear_r[0] - ear_l[0])
    a_y = abs(chin[1]) / 0.92
    depth = abs(nose[2])
    if min(a_x, a_y, depth) <= 0.0:
        raise DegenerateConfiguration("degenerate ellipsoid axes from designated landmarks")
    return a_x, a_y, depth


def render_scene(model, cam, bg_z=_SCENE_BG_Z, markers=None):
    """Ray-cast a textured head-and-backdrop scene from ``cam``.

    The head is the mean-shape ellipsoid (front half, toward the camera)
    with a deterministic banded texture; the backdrop is a checkered plane
    at world z = ``bg_z``.  ``markers`` is an optional list of
    ``(point_world, rgb, radius_m)`` dots painted onto whatever surface the
    ray hits.  Returns (float image in [0, 1], DepthImage in the camera
    frame).  Pure function of its arguments — no RNG involved.
    """
    from .warpstitch import DepthImage  # local import to avoid a cycle

    a_x, a_y, depth = fit_ellipsoid_axes(model)
    w = cam.intrinsics.width
    h = cam.intrinsics.height
    f = cam.intrinsics.focal
    rot = cam.extrinsics.rotation.matrix()
    t = cam.extrinsics.translation
    center = -rot.T @ t

    us, vs = np.meshgrid(np.arange(0.5, w), np.arange(0.5, h))
    dirs_cam = np.stack(
        [(us - cam.intrinsics.cx) / f, (vs - cam.intrinsics.cy) / f, np.ones_like(us)], axis=-1)
    dirs = dirs_cam @ rot  # R^T applied row-wise

    # Ellipsoid intersection in scaled coordinates where it is a unit sphere.
    axes = np.array([a_x, a_y, depth])
    origin_s = center / axes
    dirs_s = dirs / axes
    b = np.einsum("hwc,c->hw", dirs_s, origin_s)
    aa = np.einsum("hwc,hwc->hw", dirs_s, dirs_s)
    cc = float(origin_s @ origin_s) - 1.0
    disc = b * b - aa * cc
    with np.errstate(invalid="ignore"):
        sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
        s_face = (-b - sqrt_disc) / aa
    hit_face = (disc > 0.0) & (s_face > 0.0)
    face_pts = center + s_face[..., None] * dirs
    # Only the front half (toward the camera) is head surface.
    hit_face &= face_pts[..., 2] <= 0.0

    # Background plane z = bg_z.
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_bg = (bg_z - center[2]) / dz
    hit_bg = (dz > 0.0) & (s_bg > 0.0)
    bg_pts = center + s_bg[..., None] * dirs

    img = np.zeros((h, w, 3))
    # Checkered backdrop with a mild horizontal tint ramp.
    checker = (np.floor(bg_pts[..., 0] / _SCENE_CHECKER)
               + np.floor(bg_pts[..., 1] / _SCENE_CHECKER)).astype(int) % 2
    ramp = 0.5 + 0.25 * np.tanh(bg_pts[..., 0])
    bg_color = np.stack(
        [np.where(checker == 0, 0.25, 0.65) * ramp,
         np.where(checker == 0, 0.35, 0.55),
         np.where(checker == 0, 0.55, 0.30) * (1.5 - ramp)], axis=-1)
    img[hit_bg] = np.clip(bg_color, 0.0, 1.0)[hit_bg]

    # Banded head texture in surface angles: longitude around y, latitude rings.
    fx = face_pts[..., 0] / a_x
    fy = face_pts[..., 1] / a_y
    fz = face_pts[..., 2] / depth
    lon = np.arctan2(fx, -fz)
    lat = np.arcsin(np.clip(fy, -1.0, 1.0))
    shade = (0.75 + 0.15 * np.cos(10.0 * lon)) * (0.85 + 0.15 * np.cos(21.0 * lat))
    face_color = np.stack([0.90 * shade, 0.72 * shade, 0.58 * shade], axis=-1)
    img[hit_face] = np.clip(face_color, 0.0, 1.0)[hit_face]

    hit_any = hit_face | hit_bg
    hit_pts = np.where(hit_face[..., None], face_pts, bg_pts)
    for point, rgb, radius in markers or ():
        point = np.asarray(point, dtype=float)
        close = hit_any & (np.linalg.norm(hit_pts - point, axis=-1) < radius)
        img[close] = np.asarray(rgb, dtype=float)

    depth_cam = (hit_pts @ rot.T + t)[..., 2]
    depth_map = np.where(hit_any, depth_cam, 0.0)
    return img, DepthImage(np.where(depth_map > 0, depth_map, 0.0), hit_any & (depth_cam > 0))
