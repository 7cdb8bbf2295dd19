"""Similarity alignment, landmark error, PSNR/SSIM, and report emission."""

import math

import numpy as np
import pytest

from undistort.errors import DegenerateConfiguration, DimensionMismatch
from undistort.landmarks import LandmarkSet
from undistort.metrics import (
    PSNR_INF,
    ItemReport,
    SimilarityTransform,
    aggregate,
    evaluate_suite,
    interocular_distance,
    landmark_error,
    procrustes_align,
    psnr,
    report_csv,
    report_json,
    ssim,
    to_grayscale,
)


def _cloud(seed=0, n=20):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, (n, 2))


class TestSimilarityTransform:
    def test_apply_matches_matrix_form(self):
        tr = SimilarityTransform(1.7, 0.3, np.array([2.0, -1.0]))
        pts = _cloud(1)
        manual = 1.7 * (pts @ np.array(
            [[math.cos(0.3), math.sin(0.3)],
             [-math.sin(0.3), math.cos(0.3)]])) + np.array([2.0, -1.0])
        np.testing.assert_allclose(tr.apply(pts), manual, atol=1e-12)

    def test_inverse_round_trip(self):
        tr = SimilarityTransform(0.6, -1.1, np.array([-3.0, 4.0]))
        pts = _cloud(2)
        back = tr.inverse().apply(tr.apply(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(DegenerateConfiguration):
            SimilarityTransform(0.0, 0.0, np.zeros(2))
        with pytest.raises(DegenerateConfiguration):
            SimilarityTransform(-1.0, 0.0, np.zeros(2))

    def test_bad_translation_shape_rejected(self):
        with pytest.raises(DimensionMismatch):
            SimilarityTransform(1.0, 0.0, np.zeros(3))


class TestProcrustes:
    def test_recovers_known_similarity(self):
        src = _cloud(3)
        truth = SimilarityTransform(1.4, 0.9, np.array([0.5, -2.5]))
        dst = truth.apply(src)
        tr, residual = procrustes_align(src, dst)
        assert abs(tr.scale - truth.scale) < 1e-9
        assert abs(tr.angle - truth.angle) < 1e-9
        np.testing.assert_allclose(tr.translation, truth.translation,
                                   atol=1e-9)
        assert residual < 1e-12

    def test_residual_reported_for_noisy_match(self):
        src = _cloud(4)
        rng = np.random.default_rng(5)
        dst = src + rng.normal(scale=0.01, size=src.shape)
        _, residual = procrustes_align(src, dst)
        assert 0.0 < residual < 0.05

    def test_accepts_landmark_sets(self):
        pts = np.abs(_cloud(6)) * 0.5
        tr, residual = procrustes_align(LandmarkSet(pts), LandmarkSet(pts))
        assert residual < 1e-12
        assert abs(tr.scale - 1.0) < 1e-12

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(DegenerateConfiguration):
            procrustes_align(np.zeros((1, 2)), np.zeros((1, 2)))
        coincident = np.ones((5, 2))
        with pytest.raises(DegenerateConfiguration):
            procrustes_align(coincident, _cloud(7, 5))
        with pytest.raises(DimensionMismatch):
            procrustes_align(_cloud(8, 5), _cloud(8, 6))


class TestLandmarkError:
    def test_identical_sets_score_zero(self):
        pts = _cloud(9)
        assert landmark_error(pts, pts) == 0.0

    def test_similarity_invariance(self):
        pts = _cloud(10)
        tr = SimilarityTransform(1.3, 0.7, np.array([5.0, -3.0]))
        assert landmark_error(tr.apply(pts), pts) < 1e-9

    def test_uniform_perpendicular_offset_is_one_percent(self):
        # Even regular polygon with equal tangential offsets of alternating
        # handedness: the offsets sum to zero and are uncorrelated with the
        # radial directions, so the optimal alignment keeps identity rotation
        # and translation and only the scale responds (at second order) to
        # the added energy.  Every point then sits m/sqrt(1 + m^2/R^2) from
        # its reference, which is the 1%-of-interocular offset up to ~3e-7.
        n, radius = 8, 1.0
        theta = 2.0 * np.pi * np.arange(n) / n
        ref = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        ioc = interocular_distance(ref)
        m = 0.01 * ioc
        tangent = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
        signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        out = ref + m * signs[:, None] * tangent

        tr, _ = procrustes_align(out, ref)
        assert abs(tr.angle) < 1e-12
        assert np.abs(tr.translation).max() < 1e-12
        assert abs(tr.scale - radius**2 / (radius**2 + m**2)) < 1e-12

        err = landmark_error(out, ref)
        exact = (m / math.sqrt(1.0 + (m / radius) ** 2)) / ioc
        assert abs(err - exact) < 1e-12
        assert abs(err - 0.01) < 1e-6

    def test_interocular_distance_uses_eye_indices(self):
        pts = np.array([[0.0, 0.0], [3.0, 4.0], [9.0, 9.0]])
        assert interocular_distance(pts) == 5.0
        assert interocular_distance(pts, eyes=(0, 2)) == pytest.approx(
            math.hypot(9.0, 9.0))

    def test_zero_interocular_rejected(self):
        pts = np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
        with pytest.raises(DegenerateConfiguration):
            interocular_distance(pts)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            landmark_error(_cloud(11, 5), _cloud(11, 6))


class TestPsnr:
    def test_identical_images_infinite(self):
        img = np.random.default_rng(12).uniform(size=(16, 16, 3))
        assert psnr(img, img) == PSNR_INF
        assert math.isinf(PSNR_INF)

    def test_constant_difference_closed_form_float(self):
        a = np.full((16, 16, 3), 0.75)
        b = np.full((16, 16, 3), 0.5)
        expected = 10.0 * math.log10(1.0 / 0.25**2)
        assert abs(psnr(a, b) - expected) < 1e-9

    def test_constant_difference_closed_form_uint8(self):
        a = np.full((8, 8), 200, dtype=np.uint8)
        b = np.full((8, 8), 184, dtype=np.uint8)
        expected = 10.0 * math.log10(255.0**2 / 16.0**2)
        assert abs(psnr(a, b) - expected) < 1e-9

    def test_mask_restricts_comparison(self):
        a = np.zeros((8, 8))
        b = np.zeros((8, 8))
        b[:4] = 0.5  # damage only the unmasked half
        mask = np.zeros((8, 8), dtype=bool)
        mask[4:] = True
        assert psnr(a, b, mask) == PSNR_INF
        assert psnr(a, b) < PSNR_INF

    def test_empty_mask_and_shape_mismatch_rejected(self):
        a = np.zeros((8, 8))
        with pytest.raises(DimensionMismatch):
            psnr(a, a, np.zeros((8, 8), dtype=bool))
        with pytest.raises(DimensionMismatch):
            psnr(a, np.zeros((9, 8)))
        with pytest.raises(DimensionMismatch):
            psnr(a, a, np.zeros((4, 4), dtype=bool))


class TestSsim:
    def test_identical_images_score_one(self):
        img = np.random.default_rng(13).uniform(size=(32, 32))
        assert ssim(img, img) == 1.0

    def test_constant_images_closed_form(self):
        c1 = (0.01 * 1.0) ** 2
        a = np.full((32, 32), 0.5)
        b = np.full((32, 32), 0.75)
        closed = (2.0 * 0.5 * 0.75 + c1) / (0.5**2 + 0.75**2 + c1)
        assert abs(ssim(a, b) - closed) < 1e-9

    def test_small_image_branch_matches_closed_form(self):
        # Below the 11x11 window the comparison falls back to global
        # statistics; for constant images the value is unchanged.
        c1 = (0.01 * 1.0) ** 2
        a = np.full((8, 8), 0.5)
        b = np.full((8, 8), 0.75)
        closed = (2.0 * 0.5 * 0.75 + c1) / (0.5**2 + 0.75**2 + c1)
        assert abs(ssim(a, b) - closed) < 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(14)
        a = rng.uniform(size=(24, 24))
        b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0.0, 1.0)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_degraded_image_scores_below_one(self):
        rng = np.random.default_rng(15)
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0.0, 1.0)
        assert ssim(a, b) < 0.95

    def test_grayscale_conversion(self):
        gray = np.random.default_rng(16).uniform(size=(8, 8))
        assert to_grayscale(gray) is gray or np.array_equal(
            to_grayscale(gray), gray)
        rgb = np.zeros((4, 4, 3))
        rgb[..., 1] = 1.0
        np.testing.assert_allclose(to_grayscale(rgb), 0.587)
        with pytest.raises(DimensionMismatch):
            to_grayscale(np.zeros((4, 4, 4)))


class TestReports:
    def _items(self):
        return [
            ItemReport("a", lmk_e=0.123456789, psnr_db=20.0, ssim=0.5),
            ItemReport("b", lmk_e=None, psnr_db=PSNR_INF, ssim=1.0),
            ItemReport("c", error="DimensionMismatch: boom"),
        ]

    def test_csv_layout_and_formatting(self):
        text = report_csv(self._items())
        lines = text.splitlines()
        assert lines[0] == "id,lmk_e,psnr_db,ssim,lpips"
        assert lines[1] == "a,0.123457,20,0.5,"
        assert lines[2] == "b,,inf,1,"
        assert lines[3] == "c,,,,"
        assert text.endswith("\n")

    def test_json_mirrors_csv(self):
        records = report_json(self._items())
        assert records[0] == {"id": "a", "lmk_e": 0.123457, "psnr_db": 20.0,
                              "ssim": 0.5, "lpips": None}
        assert records[1]["psnr_db"] == "inf"
        assert records[1]["lmk_e"] is None
        assert records[2]["error"] == "DimensionMismatch: boom"
        assert all(r["lpips"] is None for r in records)

    def test_evaluate_suite_records_failures(self):
        ok_img = np.full((16, 16), 0.5)
        pts = np.abs(_cloud(17)) * 0.5
        pairs = [
            ("good", ok_img, ok_img, LandmarkSet(pts), LandmarkSet(pts)),
            ("noimg", ok_img, np.zeros((4, 4)), None, None),
            ("nolms", ok_img, ok_img, None, None),
        ]
        items = evaluate_suite(pairs)
        assert [item.item_id for item in items] == ["good", "noimg", "nolms"]
        assert items[0].lmk_e == 0.0
        assert items[0].ssim == 1.0
        assert items[0].psnr_db == PSNR_INF
        assert items[0].error is None
        assert items[1].error is not None and "DimensionMismatch" in items[1].error
        assert items[2].lmk_e is None and items[2].error is None

    def test_evaluate_suite_rejects_empty(self):
        with pytest.raises(DimensionMismatch):
            evaluate_suite([])

    def test_aggregate_excludes_inf_and_failures(self):
        items = [
            ItemReport("a", lmk_e=0.1, psnr_db=20.0, ssim=0.8),
            ItemReport("b", lmk_e=0.3, psnr_db=PSNR_INF, ssim=0.6),
            ItemReport("c", error="boom"),
        ]
        summary = aggregate(items)
        assert summary["count"] == 3
        assert summary["failed"] == 1
        assert summary["lmk_e_mean"] == pytest.approx(0.2)
        assert summary["psnr_db_mean"] == pytest.approx(20.0)
        assert summary["ssim_mean"] == pytest.approx(0.7)

    def test_aggregate_all_failed_gives_none_means(self):
        summary = aggregate([ItemReport("a", error="x")])
        assert summary["lmk_e_mean"] is None
        assert summary["psnr_db_mean"] is None
        assert summary["ssim_mean"] is None
