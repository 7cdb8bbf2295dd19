"""Evaluation metrics: similarity alignment, landmark error, PSNR, SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, DimensionMismatch
from .landmarks import LandmarkSet

# SSIM window parameters (standard reference values).
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03

# Rec. 601 luma weights for grayscale conversion.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

#: Sentinel returned by :func:`psnr` for identical images.
PSNR_INF = math.inf


@dataclass(frozen=True)
class SimilarityTransform:
    """2D similarity map ``x -> scale * R(angle) @ x + translation``."""

    scale: float
    angle: float
    translation: np.ndarray

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise DegenerateConfiguration(f"similarity scale must be > 0, got {self.scale}")
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (2,):
            raise DimensionMismatch(f"translation must be a 2-vector, got shape {t.shape}")
        object.__setattr__(self, "translation", t)

    @property
    def matrix(self) -> np.ndarray:
        """The 2x2 linear part, scale times rotation."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.matrix.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        inv_t = -inv_scale * (
            np.array([[math.cos(-self.angle), -math.sin(-self.angle)],
                      [math.sin(-self.angle), math.cos(-self.angle)]]) @ self.translation
        )
        return SimilarityTransform(inv_scale, -self.angle, inv_t)


def _as_points(lms: LandmarkSet | np.ndarray) -> np.ndarray:
    if isinstance(lms, LandmarkSet):
        return lms.points
    pts = np.asarray(lms, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionMismatch(f"expected (N, 2) points, got shape {pts.shape}")
    return pts


def procrustes_align(
    src: LandmarkSet | np.ndarray, dst: LandmarkSet | np.ndarray
) -> tuple[SimilarityTransform, float]:
    """Least-squares similarity transform taking ``src`` onto ``dst``.

    Treating 2D points as complex numbers, the optimal similarity (without
    reflection) is a single complex regression coefficient on centered
    coordinates.  Returns the transform and the residual RMS after alignment.
    """
    p = _as_points(src)
    q = _as_points(dst)
    if p.shape != q.shape:
        raise DimensionMismatch(f"point sets differ in shape: {p.shape} vs {q.shape}")
    if p.shape[0] < 2:
        raise DegenerateConfiguration("need at least 2 points to align")

    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    zp = (p - p_mean) @ np.array([1.0, 1j])
    zq = (q - q_mean) @ np.array([1.0, 1j])
    denom = float(np.sum(np.abs(zp) ** 2))
    if denom <= 0.0:
        raise DegenerateConfiguration("source points are all coincident")

    coeff = np.sum(np.conj(zp) * zq) / denom
    scale = float(np.abs(coeff))
    if scale <= 0.0:
        raise DegenerateConfiguration("degenerate alignment: zero optimal scale")
    angle = float(np.angle(coeff))
    transform = SimilarityTransform(scale, angle, q_mean - scale * _rot2(angle) @ p_mean)

    aligned = transform.apply(p)
    residual = float(np.sqrt(np.mean(np.sum((aligned - q) ** 2, axis=1))))
    return transform, residual


def _rot2(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def interocular_distance(lms: LandmarkSet | np.ndarray, eyes: tuple[int, int] = (0, 1)) -> float:
    """Distance between the two eye landmarks, the LMK-E normalizer."""
    pts = _as_points(lms)
    i, j = eyes
    d = float(np.linalg.norm(pts[i] - pts[j]))
    if d <= 0.0:
        raise DegenerateConfiguration("interocular distance is zero")
    return d


def landmark_error(
    output: LandmarkSet | np.ndarray,
    reference: LandmarkSet | np.ndarray,
    eyes: tuple[int, int] = (0, 1),
) -> float:
    """Normalized landmark error (LMK-E).

    Aligns ``output`` to ``reference`` with the best similarity transform,
    then averages the per-point Euclidean distance and divides by the
    reference interocular distance.
    """
    out = _as_points(output)
    ref = _as_points(reference)
    if out.shape != ref.shape:
        raise DimensionMismatch(f"landmark sets differ in shape: {out.shape} vs {ref.shape}")
    transform, _ = procrustes_align(out, ref)
    aligned = transform.apply(out)
    mean_dist = float(np.mean(np.linalg.norm(aligned - ref, axis=1)))
    return mean_dist / interocular_distance(ref, eyes)


def _check_pair(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise DimensionMismatch(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        raise DimensionMismatch("mask selects no pixels")
    return mask


def _peak_value(a: np.ndarray) -> float:
    return 255.0 if a.dtype == np.uint8 else 1.0


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``PSNR_INF`` for identical inputs.

    Peak is 255 for uint8 images and 1.0 for float images.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    valid = _check_pair(a, b, mask)
    peak = _peak_value(a)
    diff = a.astype(float) - b.astype(float)
    if diff.ndim == 3:
        mse = float(np.mean((diff[valid] ** 2)))
    else:
        mse = float(np.mean(diff[valid] ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter2_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2D correlation keeping only fully covered (valid) pixels."""
    pad = len(kernel) // 2
    # Horizontal then vertical pass; slicing keeps the valid region.
    tmp = np.zeros((img.shape[0], img.shape[1] - 2 * pad))
    for k, w in enumerate(kernel):
        tmp += w * img[:, k : k + tmp.shape[1]]
    out = np.zeros((img.shape[0] - 2 * pad, tmp.shape[1]))
    for k, w in enumerate(kernel):
        out += w * tmp[k : k + out.shape[0], :]
    return out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma grayscale conversion; pass-through for single-channel input."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _LUMA_WEIGHTS
    raise DimensionMismatch(f"expected HxW or HxWx3 image, got shape {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean structural similarity with an 11x11 Gaussian window, sigma 1.5.

    Images smaller than the window are compared with the global (single
    window covering everything) statistics instead.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    valid = _check_pair(a, b, mask)
    peak = _peak_value(a)
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    ga = to_grayscale(a)
    gb = to_grayscale(b)

    if min(ga.shape) < _SSIM_WINDOW:
        mu_a, mu_b = ga.mean(), gb.mean()
        var_a, var_b = ga.var(), gb.var()
        cov = float(np.mean((ga - mu_a) * (gb - mu_b)))
        return float(
            ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
            / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
        )

    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = _filter2_valid(ga, kernel)
    mu_b = _filter2_valid(gb, kernel)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = _filter2_valid(ga * ga, kernel) - mu_aa
    var_b = _filter2_valid(gb * gb, kernel) - mu_bb
    cov = _filter2_valid(ga * gb, kernel) - mu_ab

    ssim_map = ((2 * mu_ab + c1) * (2 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2))
    pad = _SSIM_WINDOW // 2
    window_mask = valid[pad:-pad, pad:-pad]
    if not window_mask.any():
        window_mask = np.ones_like(ssim_map, dtype=bool)
    return float(ssim_map[window_mask].mean())


@dataclass(frozen=True)
class ItemReport:
    """Metrics for one output/reference pair; ``error`` set if evaluation failed."""

    item_id: str
    lmk_e: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    error: str | None = None


def _format_value(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return f"{value:.6g}"


def report_csv(items: list[ItemReport]) -> str:
    """Render item reports as CSV with the fixed metric column order."""
    lines = ["id,lmk_e,psnr_db,ssim,lpips"]
    for item in items:
        lines.append(
            ",".join(
                [
                    item.item_id,
                    _format_value(item.lmk_e),
                    _format_value(item.psnr_db),
                    _format_value(item.ssim),
                    "",  # perceptual metric column intentionally left empty
                ]
            )
        )
    return "\n".join(lines) + "\n"


def report_json(items: list[ItemReport]) -> list[dict]:
    """JSON-ready mirror of :func:`report_csv`, one record per item."""
    records = []
    for item in items:
        record: dict = {"id": item.item_id}
        if item.error is not None:
            record["error"] = item.error
        record["lmk_e"] = _json_value(item.lmk_e)
        record["psnr_db"] = _json_value(item.psnr_db)
        record["ssim"] = _json_value(item.ssim)
        record["lpips"] = None
        records.append(record)
    return records


def _json_value(value: float | None):
    if value is None:
        return None
    if math.isinf(value):
        return "inf"
    return float(f"{value:.6g}")


def evaluate_suite(
    pairs: list[tuple[str, np.ndarray, np.ndarray, LandmarkSet | None, LandmarkSet | None]],
    masks: dict[str, np.ndarray] | None = None,
) -> list[ItemReport]:
    """Evaluate (output, reference) pairs; failures are recorded, not raised.

    Each pair is ``(item_id, out_image, ref_image, out_landmarks,
    ref_landmarks)``; landmark entries may be None to skip LMK-E.
    """
    if not pairs:
        raise DimensionMismatch("evaluation suite is empty")
    masks = masks or {}
    items: list[ItemReport] = []
    for item_id, out_img, ref_img, out_lms, ref_lms in pairs:
        mask = masks.get(item_id)
        try:
            lmk_e = None
            if out_lms is not None and ref_lms is not None:
                lmk_e = landmark_error(out_lms, ref_lms)
            items.append(
                ItemReport(
                    item_id=item_id,
                    lmk_e=lmk_e,
                    psnr_db=psnr(out_img, ref_img, mask),
                    ssim=ssim(out_img, ref_img, mask),
                )
            )
        except Exception as exc:  # noqa: BLE001 - per-item failures are data
            items.append(ItemReport(item_id=item_id, error=f"{type(exc).__name__}: {exc}"))
    return items


def aggregate(items: list[ItemReport]) -> dict:
    """Mean of each metric over items that produced it (inf PSNR excluded)."""
    def _mean(values: list[float]) -> float | None:
        finite = [v for v in values if v is not None and not math.isinf(v)]
        return float(np.mean(finite)) if finite else None

    return {
        "count": len(items),
        "failed": sum(1 for item in items if item.error is not None),
        "lmk_e_mean": _mean([item.lmk_e for item in items]),
        "psnr_db_mean": _mean([item.psnr_db for item in items]),
        "ssim_mean": _mean([item.ssim for item in items]),
    }
