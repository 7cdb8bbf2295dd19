"""Rotation math, projection, and the distance/focal coupling."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from undistort.errors import DegenerateDistance, PointBehindCamera
from undistort.geometry import (
    ALPHA_MAX,
    CameraExtrinsics,
    CameraIntrinsics,
    CameraState,
    ReparamAnchor,
    Rotation,
    axis_angle_from_matrix,
    compute_alpha,
    intrinsics_matrix,
    project,
    dolly_scale,
    rebase_anchor,
    rotation_matrix,
    set_distance,
    skew,
    so3_right_jacobian,
    world_to_camera,
)


def _random_axis_angle(rng, scale=np.pi * 0.9):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v) * rng.uniform(0.01, scale)


class TestRotation:
    def test_identity(self):
        np.testing.assert_allclose(rotation_matrix(np.zeros(3)), np.eye(3))

    def test_orthonormal(self, rng):
        for _ in range(20):
            R = rotation_matrix(_random_axis_angle(rng))
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_round_trip(self, rng):
        for _ in range(50):
            aa = _random_axis_angle(rng)
            back = axis_angle_from_matrix(rotation_matrix(aa))
            np.testing.assert_allclose(back, aa, atol=1e-9)

    def test_small_angle_series(self):
        aa = np.array([1e-13, -2e-13, 5e-14])
        R = rotation_matrix(aa)
        np.testing.assert_allclose(R, np.eye(3) + skew(aa), atol=1e-15)

    def test_known_quarter_turn(self):
        R = rotation_matrix(np.array([0.0, 0.0, np.pi / 2]))
        np.testing.assert_allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
    def test_round_trip_property(self, aa):
        aa = np.asarray(aa)
        angle = np.linalg.norm(aa)
        if angle > np.pi * 0.98:
            return
        back = axis_angle_from_matrix(rotation_matrix(aa))
        np.testing.assert_allclose(back, aa, atol=1e-8)

    def test_right_jacobian_composition(self, rng):
        # R(aa + d) ~= R(aa) @ R(J_r(aa) d) for small d.
        for _ in range(10):
            aa = _random_axis_angle(rng, scale=2.5)
            d = rng.normal(size=3) * 1e-7
            lhs = rotation_matrix(aa + d)
            rhs = rotation_matrix(aa) @ rotation_matrix(so3_right_jacobian(aa) @ d)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_right_jacobian_small_angle(self):
        aa = np.array([1e-6, -2e-6, 3e-6])
        J = so3_right_jacobian(aa)
        np.testing.assert_allclose(J, np.eye(3) - 0.5 * skew(aa), atol=1e-11)


class TestProjection:
    def test_center_point(self):
        intr = CameraIntrinsics(f0=500.0, gamma=1.0, alpha=1.0, cx=320.0, cy=240.0,
                                width=640, height=480)
        uv = project(intr, np.array([[0.0, 0.0, 2.0]]))
        np.testing.assert_allclose(uv, [[320.0, 240.0]])

    def test_similar_triangles(self):
        intr = CameraIntrinsics(f0=100.0, gamma=1.0, alpha=1.0, cx=0.0, cy=0.0,
                                width=640, height=480)
        uv = project(intr, np.array([[0.5, -0.25, 2.0]]))
        np.testing.assert_allclose(uv, [[25.0, -12.5]])

    def test_behind_camera_raises(self):
        intr = CameraIntrinsics(f0=100.0, gamma=1.0, alpha=1.0, cx=0.0, cy=0.0,
                                width=640, height=480)
        with pytest.raises(PointBehindCamera) as err:
            project(intr, np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
        assert err.value.index == 1

    def test_world_to_camera_roundtrip(self, rng):
        extr = CameraExtrinsics(Rotation(_random_axis_angle(rng)), rng.normal(size=3))
        pts = rng.normal(size=(7, 3))
        cam = world_to_camera(extr, pts)
        back = (cam - extr.translation) @ extr.rotation.matrix()
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_intrinsics_matrix_focal(self):
        intr = CameraIntrinsics(f0=200.0, gamma=1.1, alpha=2.0, cx=10.0, cy=20.0,
                                width=64, height=64)
        K = intrinsics_matrix(intr)
        assert K[0, 0] == pytest.approx(200.0 * 1.1 * 2.0)
        assert K[0, 2] == 10.0 and K[1, 2] == 20.0


class TestCoupling:
    def test_alpha_formula(self):
        # alpha = (d0 - (t_z0 - t_z)) / d0 with t_z = t_z0 / sqrt(delta).
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=4.0)
        assert anchor.t_z == pytest.approx(0.25)
        assert compute_alpha(anchor) == pytest.approx(0.5)

    def test_alpha_identity_at_unit_delta(self):
        anchor = ReparamAnchor(t_z0=0.4, d0=0.4, delta_tz=1.0)
        assert compute_alpha(anchor) == pytest.approx(1.0)

    def test_alpha_out_of_range(self):
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=1e9)
        with pytest.raises(DegenerateDistance):
            compute_alpha(anchor)

    def test_alpha_upper_bound(self):
        # delta -> 0 sends t_z (and alpha) to infinity.
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=1e-9)
        with pytest.raises(DegenerateDistance):
            compute_alpha(anchor)

    def test_set_distance_moves_anchor_consistently(self):
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=1.0)
        cam = CameraState.assemble(Rotation.identity(), 0.01, -0.02, anchor,
                                   f0=600.0, gamma=1.0, cx=128.0, cy=128.0,
                                   width=256, height=256)
        far = set_distance(cam, 1.0)
        assert far.distance == pytest.approx(1.0, rel=1e-12)
        # Anchor-plane magnification f/d is preserved.
        assert far.intrinsics.focal / far.distance == pytest.approx(
            cam.intrinsics.focal / cam.distance, rel=1e-12)
        # x/y translation and rotation untouched.
        np.testing.assert_allclose(far.extrinsics.translation[:2],
                                   cam.extrinsics.translation[:2])

    def test_set_distance_identity(self):
        anchor = ReparamAnchor(t_z0=0.3, d0=0.4, delta_tz=2.0)
        cam = CameraState.assemble(Rotation.identity(), 0.0, 0.0, anchor,
                                   f0=500.0, gamma=1.0, cx=0.0, cy=0.0,
                                   width=64, height=64)
        same = set_distance(cam, cam.distance)
        assert same.anchor.delta_tz == pytest.approx(cam.anchor.delta_tz, rel=1e-12)
        assert same.intrinsics.focal == pytest.approx(cam.intrinsics.focal, rel=1e-12)

    def test_rebase_preserves_physical_camera(self):
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=3.7)
        cam = CameraState.assemble(Rotation.identity(), 0.0, 0.0, anchor,
                                   f0=500.0, gamma=1.2, cx=0.0, cy=0.0,
                                   width=64, height=64)
        rebased = rebase_anchor(cam, cam.distance)
        assert rebased.anchor.delta_tz == 1.0
        assert rebased.intrinsics.focal == pytest.approx(cam.intrinsics.focal, rel=1e-12)
        np.testing.assert_allclose(rebased.extrinsics.translation,
                                   cam.extrinsics.translation)
        assert rebased.distance == pytest.approx(cam.distance, rel=1e-12)

    def test_anchor_plane_magnification_invariant(self):
        # Sweeping delta leaves gamma * f0 / d0 fixed, so anchor-plane pixel
        # separations are unchanged; this is the core coupling identity.
        f0, d0 = 640.0, 0.5
        seps = []
        for delta in (0.25, 1.0, 4.0, 16.0):
            anchor = ReparamAnchor(t_z0=d0, d0=d0, delta_tz=delta)
            cam = CameraState.assemble(Rotation.identity(), 0.0, 0.0, anchor,
                                       f0=f0, gamma=1.0, cx=0.0, cy=0.0,
                                       width=64, height=64)
            pts = np.array([[0.03, 0.0, 0.0], [-0.03, 0.01, 0.0]])
            uv = project(cam.intrinsics, world_to_camera(cam.extrinsics, pts))
            seps.append(np.linalg.norm(uv[0] - uv[1]))
        np.testing.assert_allclose(seps, seps[0], rtol=1e-12)

    def test_inconsistent_state_rejected(self):
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=1.0)
        extr = CameraExtrinsics(Rotation.identity(), np.array([0.0, 0.0, 0.9]))
        intr = CameraIntrinsics(f0=500.0, gamma=1.0, alpha=1.0, cx=0.0, cy=0.0,
                                width=64, height=64)
        with pytest.raises(DegenerateDistance):
            CameraState(extr, intr, anchor)

    def test_alpha_max_cap(self):
        assert ALPHA_MAX == 20.0
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=1.0 / 21.0**2)
        with pytest.raises(DegenerateDistance):
            compute_alpha(anchor)

    def test_dolly_scale_reaches_multiples_beyond_anchor_range(self):
        # A camera whose anchor sits far below its current distance (as an
        # optimizer leaves it) cannot be dollied 8x by set_distance alone:
        # the alpha needed relative to the old reference exceeds the ceiling.
        anchor = ReparamAnchor(t_z0=0.25, d0=0.25, delta_tz=0.14)
        cam = CameraState.assemble(Rotation.identity(), 0.01, -0.02, anchor,
                                   f0=600.0, gamma=1.0, cx=128.0, cy=128.0,
                                   width=256, height=256)
        assert cam.distance > 0.625
        with pytest.raises(DegenerateDistance):
            set_distance(cam, 8.0 * cam.distance)
        far = dolly_scale(cam, 8.0)
        assert far.distance == pytest.approx(8.0 * cam.distance, rel=1e-12)
        assert far.intrinsics.focal / far.distance == pytest.approx(
            cam.intrinsics.focal / cam.distance, rel=1e-12)
        np.testing.assert_allclose(far.extrinsics.translation[:2],
                                   cam.extrinsics.translation[:2])

    def test_dolly_scale_identity_is_bitwise_on_reference_camera(self):
        anchor = ReparamAnchor(t_z0=0.5, d0=0.5, delta_tz=1.0)
        cam = CameraState.assemble(Rotation([0.1, -0.2, 0.05]), 0.01, -0.02,
                                   anchor, f0=800.0, gamma=1.25, cx=33.0,
                                   cy=31.0, width=64, height=64)
        same = dolly_scale(cam, 1.0)
        assert same.intrinsics.focal == cam.intrinsics.focal
        assert same.intrinsics.f0 == cam.intrinsics.f0
        assert same.anchor.t_z0 == cam.anchor.t_z0
        assert same.anchor.d0 == cam.anchor.d0
        assert same.anchor.delta_tz == cam.anchor.delta_tz
        assert np.array_equal(same.extrinsics.translation,
                              cam.extrinsics.translation)

    def test_dolly_scale_rejects_scale_beyond_alpha_max(self):
        anchor = ReparamAnchor(t_z0=0.4, d0=0.4, delta_tz=1.0)
        cam = CameraState.assemble(Rotation.identity(), 0.0, 0.0, anchor,
                                   f0=500.0, gamma=1.0, cx=0.0, cy=0.0,
                                   width=64, height=64)
        with pytest.raises(DegenerateDistance):
            dolly_scale(cam, 1000.0)
