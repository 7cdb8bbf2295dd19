"""Synthetic instance generation, distortion scoring, and scene rendering."""

import numpy as np
import pytest

from undistort.errors import InputError, MissingLabels
from undistort.facemodel import FaceLatent, render_landmarks
from undistort.geometry import set_distance
from undistort.synth import (
    SynthSpec,
    distortion_score,
    fit_ellipsoid_axes,
    generate,
    make_suite,
    problem_from_instance,
    render_scene,
)

_SMALL = SynthSpec(n_landmarks=24, latent_dim=5, width=256, height=256)


class TestGenerate:
    def test_deterministic(self):
        a = generate(42, _SMALL)
        b = generate(42, _SMALL)
        np.testing.assert_array_equal(a.observed.points, b.observed.points)
        np.testing.assert_array_equal(a.true_latent.w, b.true_latent.w)
        assert a.true_distance == b.true_distance
        assert a.true_f_px == b.true_f_px
        np.testing.assert_array_equal(
            a.true_cam.extrinsics.translation, b.true_cam.extrinsics.translation)

    def test_noiseless_observation_is_exact_projection(self):
        inst = generate(7, _SMALL)
        rendered = render_landmarks(inst.model, inst.true_latent, inst.true_cam)
        np.testing.assert_array_equal(inst.observed.points, rendered.points)
        assert np.all(inst.noise == 0.0)

    def test_noise_decomposition_exact(self):
        spec = SynthSpec(n_landmarks=24, latent_dim=5, width=256, height=256,
                         noise_sigma=0.002)
        inst = generate(7, spec)
        np.testing.assert_array_equal(inst.observed.points,
                                      inst.clean.points + inst.noise)
        rendered = render_landmarks(inst.model, inst.true_latent, inst.true_cam)
        np.testing.assert_array_equal(inst.clean.points, rendered.points)
        assert float(np.std(inst.noise)) == pytest.approx(0.002, rel=0.3)

    def test_distance_within_range(self):
        for seed in range(20):
            inst = generate(seed, _SMALL)
            lo, hi = _SMALL.d_range
            assert lo <= inst.true_distance <= hi

    def test_focal_conversion(self):
        inst = generate(3, _SMALL)
        assert inst.true_f_px == inst.true_f35 * _SMALL.width / 36.0
        assert inst.true_cam.intrinsics.focal == pytest.approx(inst.true_f_px)

    def test_landmarks_inside_frame(self):
        for seed in range(10):
            pts = generate(seed, _SMALL).observed.points
            assert pts.min() > 0.0 and pts.max() < 1.0

    def test_latent_truncated(self):
        for seed in range(10):
            w = generate(seed, _SMALL).true_latent.w
            assert np.abs(w).max() <= _SMALL.w_limit

    def test_invalid_spec_rejected(self):
        with pytest.raises(InputError):
            SynthSpec(d_range=(-0.1, 0.5))
        with pytest.raises(InputError):
            SynthSpec(d_range=(0.7, 0.25))
        with pytest.raises(InputError):
            SynthSpec(noise_sigma=-1.0)
        with pytest.raises(InputError):
            SynthSpec(f35_range=(0.0, 10.0))


class TestMakeSuite:
    def test_shared_model(self):
        suite = make_suite(5, 100, _SMALL)
        assert len(suite) == 5
        first = suite[0].model
        for inst in suite[1:]:
            assert inst.model is first

    def test_seeds_sequential_and_reproducible(self):
        suite = make_suite(3, 100, _SMALL)
        assert [inst.seed for inst in suite] == [100, 101, 102]
        again = generate(101, _SMALL, model=suite[0].model)
        np.testing.assert_array_equal(suite[1].observed.points,
                                      again.observed.points)

    def test_problem_wrapping(self):
        inst = generate(4, _SMALL)
        problem = problem_from_instance(inst)
        assert problem.observed is inst.observed
        assert problem.model is inst.model
        assert (problem.width, problem.height) == (256, 256)


class TestDistortionScore:
    def test_identical_sets_score_zero(self):
        inst = generate(2, _SMALL)
        labels = list(inst.model.labels)
        assert distortion_score(inst.clean, inst.clean, labels) == 0.0

    def test_near_render_scores_positive(self):
        inst = generate(2, _SMALL)
        labels = list(inst.model.labels)
        near_cam = set_distance(inst.true_cam, 0.25)
        far_cam = set_distance(inst.true_cam, 2.0)
        near = render_landmarks(inst.model, inst.true_latent, near_cam)
        far = render_landmarks(inst.model, inst.true_latent, far_cam)
        assert distortion_score(near, far, labels) > 0.0

    def test_score_decreases_as_distance_grows(self):
        inst = generate(2, _SMALL)
        labels = list(inst.model.labels)
        far = render_landmarks(inst.model, inst.true_latent,
                               set_distance(inst.true_cam, 2.0))
        scores = []
        for d in (0.25, 0.4, 0.7, 1.2, 2.0):
            near = render_landmarks(inst.model, inst.true_latent,
                                    set_distance(inst.true_cam, d))
            scores.append(distortion_score(near, far, labels))
        assert all(a > b for a, b in zip(scores, scores[1:]))
        assert scores[-1] == pytest.approx(0.0, abs=1e-12)

    def test_missing_labels_rejected(self):
        inst = generate(2, _SMALL)
        generic = [f"pt_{i}" for i in range(inst.model.n_landmarks)]
        with pytest.raises(MissingLabels):
            distortion_score(inst.clean, inst.clean, generic)


@pytest.fixture(scope="module")
def scene():
    inst = generate(6, _SMALL)
    img, depth = render_scene(inst.model, inst.true_cam)
    return inst, img, depth


class TestRenderScene:
    def test_shapes_and_ranges(self, scene):
        inst, img, depth = scene
        assert img.shape == (256, 256, 3)
        assert 0.0 <= img.min() and img.max() <= 1.0
        assert depth.depth.shape == (256, 256)
        assert np.all(depth.depth[depth.valid] > 0.0)
        assert np.all(np.isfinite(depth.depth[depth.valid]))

    def test_deterministic(self, scene):
        inst, img, depth = scene
        img2, depth2 = render_scene(inst.model, inst.true_cam)
        np.testing.assert_array_equal(img, img2)
        np.testing.assert_array_equal(depth.depth, depth2.depth)

    def test_face_nearer_than_background(self, scene):
        inst, img, depth = scene
        # The anchor projects near the frame center; background rows at the
        # frame top are plane pixels.  Face depth must be well in front.
        h, w = depth.depth.shape
        center = depth.depth[h // 2, w // 2]
        top = depth.depth[2, w // 2]
        assert center < top

    def test_marker_painted(self, scene):
        # Mark the nose apex: it sits on the rendered ellipsoid's front
        # pole, so rays hit within the marker radius.
        inst, img_plain, _ = scene
        labels = list(inst.model.labels)
        nose = inst.model.mean_shape[labels.index("nose_apex")]
        img_marked, _ = render_scene(
            inst.model, inst.true_cam,
            markers=[(nose, (1.0, 0.0, 0.0), 0.01)])
        assert not np.array_equal(img_plain, img_marked)
        painted = np.all(img_marked == np.array([1.0, 0.0, 0.0]), axis=-1)
        assert painted.sum() > 0


class TestFitEllipsoidAxes:
    def test_positive_axes(self):
        inst = generate(1, _SMALL)
        a_x, a_y, depth = fit_ellipsoid_axes(inst.model)
        assert a_x > 0 and a_y > 0 and depth > 0
        # Anthropometric sanity: half-axes of a head are centimeters.
        assert 0.02 < a_x < 0.2
        assert 0.02 < a_y < 0.25

    def test_missing_labels(self):
        inst = generate(1, _SMALL)
        from undistort.facemodel import FaceModel

        stripped = FaceModel(
            mean_shape=inst.model.mean_shape,
            basis=inst.model.basis,
            eye_indices=inst.model.eye_indices,
            labels=tuple(f"pt_{i}" for i in range(inst.model.n_landmarks)))
        with pytest.raises(MissingLabels):
            fit_ellipsoid_axes(stripped)
