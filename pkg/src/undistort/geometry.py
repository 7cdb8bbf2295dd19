"""Pinhole camera geometry with a distance-coupled focal length.

Conventions used throughout the package:

* World-to-camera: a world point ``p_w`` maps to camera coordinates
  ``p_c = R @ p_w + t``.  The camera looks down its own +z axis, so a
  point is renderable only when ``p_c[2] > z_min``.
* Projection: ``u = f * x / z + cx`` and ``v = f * y / z + cy``, pixel
  units, u growing right and v growing down.
* Rotations are stored as axis-angle vectors (direction = axis,
  magnitude = angle in radians); matrices are materialized on demand.
* The z-translation is driven through a single positive knob:
  ``t_z = t_z0 / sqrt(delta_tz)``.  With
  ``alpha = (d0 - (t_z0 - t_z)) / d0`` the effective focal length is
  ``f = gamma * alpha * f0``.  This coupling keeps the magnification of
  the anchor plane (the plane through the eye midpoint, perpendicular to
  the optical axis) constant while the camera moves along the axis: the
  camera-to-anchor distance is ``alpha * d0`` and the anchor-plane
  magnification ``f / (alpha * d0) = gamma * f0 / d0`` does not depend
  on ``delta_tz``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDistance,
    DimensionMismatch,
    NonPositiveFocal,
    PointBehindCamera,
)

# Renderability and coupling bounds.  The solver clamps its step sizes to
# respect these; analysis-level operations raise instead of clamping.
Z_MIN = 1e-4
ALPHA_MIN = 1e-3
ALPHA_MAX = 20.0


def skew(v):
    """Cross-product matrix: skew(v) @ x == np.cross(v, x)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_matrix(axis_angle):
    """Rodrigues' formula, second-order series below ~1e-12 radians."""
    aa = np.asarray(axis_angle, dtype=float)
    if aa.shape != (3,):
        raise DimensionMismatch(f"axis-angle must have shape (3,), got {aa.shape}")
    theta = float(np.linalg.norm(aa))
    if theta < 1e-12:
        k = skew(aa)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = skew(aa / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def axis_angle_from_matrix(mat):
    """Inverse of :func:`rotation_matrix` via quaternion extraction.

    Returns an axis-angle vector with angle in [0, pi].  The action of the
    rotation round-trips; the vector itself is canonicalized.
    """
    m = np.asarray(mat, dtype=float)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0.0:
        s = 2.0 * math.sqrt(trace + 1.0)
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0.0:
        q = -q
    vec_norm = float(np.linalg.norm(q[1:]))
    angle = 2.0 * math.atan2(vec_norm, q[0])
    if vec_norm < 1e-12:
        return np.zeros(3)
    return (angle / vec_norm) * q[1:]


def so3_right_jacobian(axis_angle):
    """Right Jacobian J_r of SO(3): R(aa + d) ~= R(aa) @ R(J_r @ d).

    Used by the analytic objective gradient; series expansion below 1e-4
    radians keeps it exact to double precision.
    """
    aa = np.asarray(axis_angle, dtype=float)
    t = float(np.linalg.norm(aa))
    k = skew(aa)
    if t < 1e-4:
        t2 = t * t
        c1 = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c2 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c1 = (1.0 - math.cos(t)) / (t * t)
        c2 = (t - math.sin(t)) / (t * t * t)
    return np.eye(3) - c1 * k + c2 * (k @ k)


@dataclass(frozen=True, eq=False)
class Rotation:
    """3D rotation stored as an axis-angle vector."""

    axis_angle: np.ndarray

    def __post_init__(self):
        aa = np.asarray(self.axis_angle, dtype=float)
        if aa.shape != (3,):
            raise DimensionMismatch(f"axis-angle must have shape (3,), got {aa.shape}")
        if not np.all(np.isfinite(aa)):
            raise DimensionMismatch("axis-angle must be finite")
        object.__setattr__(self, "axis_angle", aa)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3))

    @classmethod
    def from_matrix(cls, mat):
        return cls(axis_angle_from_matrix(mat))

    def matrix(self):
        return rotation_matrix(self.axis_angle)


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """World-to-camera rigid transform: p_c = R @ p_w + translation."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,):
            raise DimensionMismatch(f"translation must have shape (3,), got {t.shape}")
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class ReparamAnchor:
    """Frozen reference values of the distance/focal coupling.

    Attributes:
        t_z0: z-translation at the reference state (meters, nonzero).
        d0: camera-to-anchor distance at the reference state (meters, > 0).
        delta_tz: current positive knob; t_z = t_z0 / sqrt(delta_tz).
    """

    t_z0: float
    d0: float
    delta_tz: float

    def __post_init__(self):
        if not (self.d0 > 0.0):
            raise DegenerateDistance(f"anchor d0 must be positive, got {self.d0}")
        if self.t_z0 == 0.0:
            raise DegenerateDistance("anchor t_z0 must be nonzero")
        if not (self.delta_tz > 0.0):
            raise DegenerateDistance(
                f"delta_tz must be positive, got {self.delta_tz}")

    @property
    def t_z(self):
        return self.t_z0 / math.sqrt(self.delta_tz)


def compute_alpha(anchor, alpha_min=ALPHA_MIN, alpha_max=ALPHA_MAX):
    """Focal/distance coupling factor for the current ``delta_tz``.

    alpha = (d0 - (t_z0 - t_z)) / d0, with t_z = t_z0 / sqrt(delta_tz).
    The camera-to-anchor distance of a coupled state is alpha * d0.

    Raises:
        DegenerateDistance: if alpha falls outside (alpha_min, alpha_max].
    """
    alpha = (anchor.d0 - (anchor.t_z0 - anchor.t_z)) / anchor.d0
    if not (alpha > alpha_min):
        raise DegenerateDistance(
            f"alpha={alpha:.6g} <= alpha_min={alpha_min:.6g} "
            f"(camera collapsed onto the subject)")
    if alpha > alpha_max:
        raise DegenerateDistance(
            f"alpha={alpha:.6g} exceeds alpha_max={alpha_max:.6g}")
    return alpha


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with the focal expressed as gamma * alpha * f0."""

    f0: float
    gamma: float
    alpha: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f0 > 0.0):
            raise NonPositiveFocal(f"f0 must be positive, got {self.f0}")
        if not (self.gamma > 0.0):
            raise NonPositiveFocal(f"gamma must be positive, got {self.gamma}")
        if not (0.0 < self.alpha <= ALPHA_MAX):
            raise DegenerateDistance(
                f"alpha={self.alpha:.6g} outside (0, {ALPHA_MAX}]")
        if self.width <= 0 or self.height <= 0:
            raise DimensionMismatch(
                f"image size must be positive, got {self.width}x{self.height}")

    @property
    def focal(self):
        return self.gamma * self.alpha * self.f0


def intrinsics_matrix(intrinsics):
    """3x3 calibration matrix [[f, 0, cx], [0, f, cy], [0, 0, 1]]."""
    f = intrinsics.focal
    if not (f > 0.0):
        raise NonPositiveFocal(f"effective focal must be positive, got {f}")
    return np.array(
        [[f, 0.0, intrinsics.cx], [0.0, f, intrinsics.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraState:
    """Extrinsics + intrinsics + coupling anchor, kept mutually consistent.

    States are only built through :meth:`assemble` or :func:`set_distance`,
    which derive ``t_z`` and ``alpha`` from the anchor; the constructor
    re-checks both so a hand-patched state cannot slip through.
    """

    extrinsics: CameraExtrinsics
    intrinsics: CameraIntrinsics
    anchor: ReparamAnchor

    def __post_init__(self):
        t_z = self.anchor.t_z
        got = float(self.extrinsics.translation[2])
        if abs(got - t_z) > 1e-9 * max(1.0, abs(t_z)):
            raise DegenerateDistance(
                f"t_z={got!r} inconsistent with anchor (expected {t_z!r})")
        alpha = compute_alpha(self.anchor)
        if abs(alpha - self.intrinsics.alpha) > 1e-9 * max(1.0, abs(alpha)):
            raise DegenerateDistance(
                f"alpha={self.intrinsics.alpha!r} inconsistent with anchor "
                f"(expected {alpha!r})")

    @classmethod
    def assemble(cls, rotation, t_x, t_y, anchor, f0, gamma, cx, cy, width, height):
        """Build a consistent state, deriving t_z and alpha from the anchor."""
        alpha = compute_alpha(anchor)
        extr = CameraExtrinsics(rotation, np.array([t_x, t_y, anchor.t_z]))
        intr = CameraIntrinsics(f0, gamma, alpha, cx, cy, width, height)
        return cls(extr, intr, anchor)

    @property
    def distance(self):
        """Camera-to-anchor distance along the optical axis: alpha * d0."""
        return self.intrinsics.alpha * self.anchor.d0


def world_to_camera(extrinsics, points):
    """Apply p_c = R @ p_w + t to one point or an (..., 3) array."""
    p = np.asarray(points, dtype=float)
    if p.shape[-1] != 3:
        raise DimensionMismatch(f"points must have trailing dim 3, got {p.shape}")
    r = extrinsics.rotation.matrix()
    return p @ r.T + extrinsics.translation


def project(intrinsics, points_cam, z_min=Z_MIN):
    """Project camera-frame points to pixel coordinates.

    Args:
        intrinsics: CameraIntrinsics supplying focal and principal point.
        points_cam: one 3-vector or an (..., 3) array in the camera frame.
        z_min: renderability threshold; any depth <= z_min raises.

    Returns:
        Pixel coordinates with shape points_cam.shape[:-1] + (2,).

    Raises:
        PointBehindCamera: if any point has z <= z_min; carries the flat
            index of the first offender.
    """
    p = np.asarray(points_cam, dtype=float)
    if p.shape[-1] != 3:
        raise DimensionMismatch(f"points must have trailing dim 3, got {p.shape}")
    z = p[..., 2]
    behind = z <= z_min
    if np.any(behind):
        idx = int(np.argmax(np.ravel(behind)))
        raise PointBehindCamera(
            f"point at flat index {idx} has z={np.ravel(z)[idx]:.6g} <= "
            f"z_min={z_min:.6g}", index=idx)
    f = intrinsics.focal
    uv = np.empty(p.shape[:-1] + (2,))
    uv[..., 0] = f * p[..., 0] / z + intrinsics.cx
    uv[..., 1] = f * p[..., 1] / z + intrinsics.cy
    return uv


def set_distance(state, target_d):
    """Dolly the camera so the anchor distance becomes ``target_d``.

    Only ``delta_tz`` moves; rotation and lateral translation stay fixed,
    and the focal follows the coupling, so the anchor plane keeps its
    projected position and magnification.

    Raises:
        DegenerateDistance: target_d <= 0, target_d/d0 outside the valid
            alpha range, or a z-translation sign flip.
    """
    if not (target_d > 0.0):
        raise DegenerateDistance(f"target distance must be positive, got {target_d}")
    anchor = state.anchor
    alpha_new = target_d / anchor.d0
    if not (ALPHA_MIN < alpha_new <= ALPHA_MAX):
        raise DegenerateDistance(
            f"target distance {target_d:.6g} m needs alpha={alpha_new:.6g}, "
            f"outside ({ALPHA_MIN}, {ALPHA_MAX}]")
    t_z_new = anchor.t_z0 - anchor.d0 * (1.0 - alpha_new)
    if t_z_new == 0.0 or (t_z_new > 0.0) != (anchor.t_z0 > 0.0):
        raise DegenerateDistance(
            f"target distance {target_d:.6g} m would flip t_z across zero")
    delta_new = (anchor.t_z0 / t_z_new) ** 2
    new_anchor = ReparamAnchor(anchor.t_z0, anchor.d0, delta_new)
    return CameraState.assemble(
        state.extrinsics.rotation,
        float(state.extrinsics.translation[0]),
        float(state.extrinsics.translation[1]),
        new_anchor,
        state.intrinsics.f0,
        state.intrinsics.gamma,
        state.intrinsics.cx,
        state.intrinsics.cy,
        state.intrinsics.width,
        state.intrinsics.height,
    )


def dolly_scale(state, scale):
    """Camera at ``scale`` times the current anchor distance.

    Re-references the coupling at the current pose first (unless it is
    already the reference), so any multiple up to the alpha ceiling is
    reachable regardless of where the state's anchor happens to sit.

    Raises:
        DegenerateDistance: scale outside the valid alpha range.
    """
    if state.anchor.delta_tz != 1.0 or state.anchor.d0 != state.distance:
        state = rebase_anchor(state, state.distance)
    return set_distance(state, scale * state.distance)


def rebase_anchor(state, d0_new):
    """Re-reference the coupling at the current pose: delta_tz becomes 1.

    The physical camera is unchanged; ``t_z0`` is set to the current t_z,
    ``d0`` to ``d0_new`` (the camera-to-anchor distance the caller wants
    the new reference to represent), and ``f0`` to the current effective
    focal divided by gamma, so the effective focal is also unchanged.
    """
    if not (d0_new > 0.0):
        raise DegenerateDistance(f"rebased d0 must be positive, got {d0_new}")
    t_z = state.anchor.t_z
    new_anchor = ReparamAnchor(t_z, d0_new, 1.0)
    f0_new = state.intrinsics.focal / state.intrinsics.gamma
    return CameraState.assemble(
        state.extrinsics.rotation,
        float(state.extrinsics.translation[0]),
        float(state.extrinsics.translation[1]),
        new_anchor,
        f0_new,
        state.intrinsics.gamma,
        state.intrinsics.cx,
        state.intrinsics.cy,
        state.intrinsics.width,
        state.intrinsics.height,
    )
