"""Linear landmark face model: mean shape + orthogonal deformation basis.

The canonical frame puts the shape centroid at the origin with x to the
subject's left-right axis, y down, and the face front pointing toward -z,
so a camera with identity rotation and positive t_z sees the nose as the
nearest point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidDimensions, PointBehindCamera
from .geometry import Z_MIN, project, world_to_camera
from .landmarks import LandmarkSet

# Semantic landmarks occupy the first indices of every synthesized model,
# in this order; remaining points are generic surface samples.
DESIGNATED_LABELS = (
    "eye_left",
    "eye_right",
    "nose_apex",
    "nose_left",
    "nose_right",
    "ear_left",
    "ear_right",
    "chin",
)

MIN_LANDMARKS = len(DESIGNATED_LABELS)

# Per-unit-coefficient RMS displacement of one basis mode, meters.  Modes are
# built from localized kernel bumps: a short length scale keeps identity
# variation spatially local, so it stays distinguishable from the globally
# smooth displacement field that a distance change induces.
_MODE_RMS = 0.002
_MODE_CENTERS = 12
_MODE_LENGTH_SCALE = 0.02


@dataclass(eq=False)
class FaceModel:
    """Mean landmark shape with an orthogonal linear deformation basis.

    Attributes:
        mean_shape: (N, 3) meters, centroid at the origin.
        basis: (K, N, 3); modes are mutually orthogonal under the flattened
            inner product (checked to 1e-6 on cosines at construction).
        eye_indices: indices of the left and right eye landmarks.
        labels: N semantic labels; the first MIN_LANDMARKS follow
            DESIGNATED_LABELS in synthesized models.
    """

    mean_shape: np.ndarray
    basis: np.ndarray
    eye_indices: tuple
    labels: list

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=float)
        basis = np.asarray(self.basis, dtype=float)
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise DimensionMismatch(f"mean_shape must be (N, 3), got {mean.shape}")
        n = mean.shape[0]
        if n < MIN_LANDMARKS:
            raise InvalidDimensions(
                f"model needs at least {MIN_LANDMARKS} landmarks, got {n}")
        if basis.ndim != 3 or basis.shape[1:] != (n, 3):
            raise DimensionMismatch(
                f"basis must be (K, {n}, 3), got {basis.shape}")
        if basis.shape[0] < 1:
            raise InvalidDimensions("basis needs at least one mode")
        centroid = mean.mean(axis=0)
        if np.max(np.abs(centroid)) > 1e-9:
            raise DimensionMismatch(
                f"mean shape centroid must be at the origin, got {centroid}")
        flat = basis.reshape(basis.shape[0], -1)
        norms = np.linalg.norm(flat, axis=1)
        if np.any(norms == 0.0):
            raise DimensionMismatch("basis contains a zero mode")
        gram = (flat / norms[:, None]) @ (flat / norms[:, None]).T
        off = gram - np.diag(np.diag(gram))
        if np.max(np.abs(off)) > 1e-6:
            raise DimensionMismatch(
                f"basis modes not orthogonal (max cosine {np.max(np.abs(off)):.3g})")
        ei = tuple(int(i) for i in self.eye_indices)
        if len(ei) != 2 or ei[0] == ei[1] or not all(0 <= i < n for i in ei):
            raise DimensionMismatch(f"invalid eye indices {self.eye_indices}")
        labels = list(self.labels)
        if len(labels) != n:
            raise DimensionMismatch(
                f"expected {n} labels, got {len(labels)}")
        self.mean_shape = mean
        self.basis = basis
        self.eye_indices = ei
        self.labels = labels

    @property
    def n_landmarks(self):
        return self.mean_shape.shape[0]

    @property
    def latent_dim(self):
        return self.basis.shape[0]


@dataclass(eq=False)
class FaceLatent:
    """Deformation coefficients plus an unconstrained per-landmark residual."""

    w: np.ndarray
    residual: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1:
            raise DimensionMismatch(f"w must be 1-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise DimensionMismatch("latent coefficients must be finite")
        self.w = w
        if self.residual is not None:
            res = np.asarray(self.residual, dtype=float)
            if res.ndim != 2 or res.shape[1] != 3:
                raise DimensionMismatch(
                    f"residual must be (N, 3), got {res.shape}")
            if not np.all(np.isfinite(res)):
                raise DimensionMismatch("residual must be finite")
            self.residual = res

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros(model.latent_dim), np.zeros((model.n_landmarks, 3)))


def shape(model, latent):
    """World-frame landmark positions: mean + w . basis + residual.

    Linear in the latent, so superposition holds exactly.
    """
    if latent.w.shape[0] != model.latent_dim:
        raise DimensionMismatch(
            f"latent dim {latent.w.shape[0]} != model dim {model.latent_dim}")
    pts = model.mean_shape + np.tensordot(latent.w, model.basis, axes=1)
    if latent.residual is not None:
        if latent.residual.shape[0] != model.n_landmarks:
            raise DimensionMismatch(
                f"residual rows {latent.residual.shape[0]} != "
                f"{model.n_landmarks} landmarks")
        pts = pts + latent.residual
    return pts


def eye_midpoint(model, latent=None):
    """Midpoint of the two eye landmarks, world frame."""
    pts = model.mean_shape if latent is None else shape(model, latent)
    li, ri = model.eye_indices
    return 0.5 * (pts[li] + pts[ri])


def render_landmarks(model, latent, cam, z_min=Z_MIN):
    """Project the latent shape through a camera state.

    Returns:
        LandmarkSet in normalized coordinates, all landmarks visible,
        sigma set to 1 (rendered sets carry no detector confidence).

    Raises:
        PointBehindCamera: if any landmark fails the z > z_min test; the
            error index identifies the landmark.
    """
    pts = shape(model, latent)
    p_cam = world_to_camera(cam.extrinsics, pts)
    try:
        uv = project(cam.intrinsics, p_cam, z_min=z_min)
    except PointBehindCamera as exc:
        raise PointBehindCamera(
            f"landmark {exc.index} is behind the camera: {exc}",
            index=exc.index) from exc
    size = np.array([float(cam.intrinsics.width), float(cam.intrinsics.height)])
    return LandmarkSet(uv / size, np.ones(model.n_landmarks, dtype=bool),
                       np.ones(model.n_landmarks))


def _half_ellipsoid_samples(rng, count, ax, ay, az):
    """Points on the front (z < 0) half of an ellipsoid, mild radial jitter."""
    phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
    # cos(theta) in [0.05, 1]: stay on the camera-facing half.
    c = rng.uniform(0.05, 1.0, size=count)
    s = np.sqrt(1.0 - c * c)
    r = rng.uniform(0.97, 1.0, size=count)
    pts = np.empty((count, 3))
    pts[:, 0] = ax * s * np.cos(phi) * r
    pts[:, 1] = ay * s * np.sin(phi) * r
    pts[:, 2] = -az * c * r
    return pts


def synthesize_model(seed, n_landmarks=468, latent_dim=32,
                     nose_depth_range=(0.062, 0.098)):
    """Deterministically build a face-like landmark model.

    The mean shape is sampled on the front half of an ellipsoid with the
    nose apex protruding toward -z; the first MIN_LANDMARKS points are the
    designated semantic landmarks.  The basis is an orthogonalized set of
    smooth random deformation fields scaled to ~3 mm RMS per unit
    coefficient.

    Args:
        seed: RNG seed; the same seed yields a bit-identical model.
        n_landmarks: total landmark count, >= MIN_LANDMARKS.
        latent_dim: number of deformation modes, >= 1.
        nose_depth_range: bounds for the nose-to-ear depth offset, meters.

    Raises:
        InvalidDimensions: on out-of-range sizes.
    """
    if n_landmarks < MIN_LANDMARKS:
        raise InvalidDimensions(
            f"n_landmarks must be >= {MIN_LANDMARKS}, got {n_landmarks}")
    if latent_dim < 1:
        raise InvalidDimensions(f"latent_dim must be >= 1, got {latent_dim}")
    if latent_dim > 3 * n_landmarks - 7:
        raise InvalidDimensions(
            f"latent_dim {latent_dim} too large for {n_landmarks} landmarks")
    rng = np.random.default_rng(seed)

    ax = rng.uniform(0.070, 0.080)
    ay = rng.uniform(0.090, 0.110)
    nose_depth = rng.uniform(*nose_depth_range)

    designated = np.array([
        [-0.032, -0.020, -0.35 * nose_depth],   # eye_left
        [+0.032, -0.020, -0.35 * nose_depth],   # eye_right
        [0.000, 0.012, -nose_depth],            # nose_apex
        [-0.016, 0.016, -0.78 * nose_depth],    # nose_left
        [+0.016, 0.016, -0.78 * nose_depth],    # nose_right
        [-ax, 0.004, 0.0],                      # ear_left
        [+ax, 0.004, 0.0],                      # ear_right
        [0.000, 0.92 * ay, -0.18 * nose_depth], # chin
    ])
    extra = _half_ellipsoid_samples(rng, n_landmarks - MIN_LANDMARKS, ax, ay,
                                    nose_depth)
    pts = np.vstack([designated, extra])
    pts = pts - pts.mean(axis=0)

    labels = list(DESIGNATED_LABELS) + [
        f"face_{i:03d}" for i in range(n_landmarks - MIN_LANDMARKS)]

    # Smooth random fields -> Gram-Schmidt -> fixed per-mode RMS.
    flat_dim = 3 * n_landmarks
    modes = np.zeros((latent_dim, flat_dim))
    target_norm = _MODE_RMS * np.sqrt(n_landmarks)
    k = 0
    while k < latent_dim:
        centers = _half_ellipsoid_samples(rng, _MODE_CENTERS, ax, ay, nose_depth)
        coeffs = rng.normal(size=(_MODE_CENTERS, 3))
        d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        weights = np.exp(-d2 / (2.0 * _MODE_LENGTH_SCALE ** 2))
        field = (weights @ coeffs).ravel()
        for j in range(k):
            field = field - (field @ modes[j]) * modes[j] / (modes[j] @ modes[j])
        norm = np.linalg.norm(field)
        if norm < 1e-8 * target_norm:
            continue  # degenerate draw; try a fresh field
        modes[k] = field * (target_norm / norm)
        k += 1

    return FaceModel(pts, modes.reshape(latent_dim, n_landmarks, 3),
                     (0, 1), labels)
