"""Full-frame correction: depth reprojection, landmark-driven flow, blending."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateControlPoints,
    DimensionMismatch,
    InsufficientOverlap,
    MissingInput,
)
from .facemodel import FaceLatent, FaceModel, render_landmarks
from .geometry import CameraState, dolly_scale
from .landmarks import LandmarkSet

# Feather band width for depth compositing, pixels.
_DEPTH_FEATHER_PX = 16
# Least-squares fit needs this many overlapping valid pixels.
_MIN_OVERLAP_PX = 100
# Default TPS regularization (kernel units).
_TPS_LAMBDA = 1e-6
# Flow attenuation reaches zero at this multiple of the hull radius.
_ATTENUATION_OUTER = 1.5
# Gaussian feather for the face-hull blend mask, pixels.
_HULL_FEATHER_SIGMA = 8.0
# Hole-filling diffusion iteration cap.
_MAX_FILL_ITERS = 50
# Supersampling factor for forward splatting.
_SPLAT_SUPERSAMPLE = 2


@dataclass
class DepthImage:
    """Per-pixel metric depth in the camera frame with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.ndim != 2:
            raise DimensionMismatch(f"depth must be HxW, got shape {self.depth.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.depth) & (self.depth > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.depth.shape:
                raise DimensionMismatch(
                    f"valid mask shape {self.valid.shape} != depth shape {self.depth.shape}"
                )
        bad = self.valid & ~(np.isfinite(self.depth) & (self.depth > 0))
        if bad.any():
            raise DimensionMismatch(f"{int(bad.sum())} pixels marked valid have non-positive depth")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class FlowField:
    """Per-pixel 2D displacement in pixels, (H, W, 2) as (du, dv)."""

    flow: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.flow = np.asarray(self.flow, dtype=float)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise DimensionMismatch(f"flow must be HxWx2, got shape {self.flow.shape}")
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.flow), axis=2)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.flow.shape[:2]:
                raise DimensionMismatch(
                    f"valid mask shape {self.valid.shape} != flow grid {self.flow.shape[:2]}"
                )
        if not np.all(np.isfinite(self.flow[self.valid])):
            raise DimensionMismatch("flow contains non-finite values on valid pixels")


def _as_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DimensionMismatch(f"image must be HxW or HxWxC, got shape {img.shape}")
    return img


def align_depth(
    face_depth: DepthImage,
    full_depth: DepthImage,
    crop: tuple[int, int, int, int],
    feather_px: int = _DEPTH_FEATHER_PX,
) -> DepthImage:
    """Fit ``a * full + b ~= face`` on the crop overlap and composite.

    ``crop`` is (x0, y0, width, height) of the face depth inside the full
    frame.  Monocular depth is scale/shift ambiguous, so the full-frame depth
    is brought into the face crop's metric frame; the face depth then replaces
    the crop region with a feathered transition band.
    """
    x0, y0, cw, ch = crop
    if face_depth.depth.shape != (ch, cw):
        raise DimensionMismatch(
            f"face depth shape {face_depth.depth.shape} != crop ({ch}, {cw})"
        )
    if x0 < 0 or y0 < 0 or x0 + cw > full_depth.width or y0 + ch > full_depth.height:
        raise DimensionMismatch(f"crop {crop} outside full frame "
                                f"{full_depth.width}x{full_depth.height}")

    full_crop = full_depth.depth[y0 : y0 + ch, x0 : x0 + cw]
    overlap = face_depth.valid & full_depth.valid[y0 : y0 + ch, x0 : x0 + cw]
    n_overlap = int(overlap.sum())
    if n_overlap < _MIN_OVERLAP_PX:
        raise InsufficientOverlap(
            f"depth overlap has {n_overlap} valid pixels, need >= {_MIN_OVERLAP_PX}"
        )

    f = full_crop[overlap]
    g = face_depth.depth[overlap]
    design = np.stack([f, np.ones_like(f)], axis=1)
    (a, b), *_ = np.linalg.lstsq(design, g, rcond=None)

    out = a * full_depth.depth + b
    out_valid = full_depth.valid.copy()

    # Feathered compositing weight: 1 deep inside the crop, ramping to 0 at
    # its border over `feather_px` pixels, and 0 wherever face depth is bad.
    yy, xx = np.mgrid[0:ch, 0:cw]
    border_dist = np.minimum.reduce([xx + 1, cw - xx, yy + 1, ch - yy]).astype(float)
    alpha = np.clip(border_dist / max(feather_px, 1), 0.0, 1.0)
    alpha[~face_depth.valid] = 0.0

    region = out[y0 : y0 + ch, x0 : x0 + cw]
    blended = alpha * face_depth.depth + (1.0 - alpha) * region
    # Where the scaled full depth is invalid, the face value stands alone.
    full_bad = ~full_depth.valid[y0 : y0 + ch, x0 : x0 + cw]
    blended[full_bad & face_depth.valid] = face_depth.depth[full_bad & face_depth.valid]
    out[y0 : y0 + ch, x0 : x0 + cw] = blended
    out_valid[y0 : y0 + ch, x0 : x0 + cw] |= face_depth.valid
    # Non-positive blends (possible with extreme a, b) are dropped from the mask.
    out_valid &= np.isfinite(out) & (out > 0)
    return DepthImage(np.where(out_valid, out, 0.0), out_valid)


def _pixel_grid(width: int, height: int, step: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center sample coordinates with optional sub-pixel stepping."""
    us = np.arange(step / 2.0, width, step)
    vs = np.arange(step / 2.0, height, step)
    return np.meshgrid(us, vs)


def reprojection_map(
    depth: DepthImage, cam_src: CameraState, cam_dst: CameraState
) -> FlowField:
    """Continuous destination coordinates for each source pixel center.

    The returned field stores, per source pixel, the displacement (du, dv)
    such that the source content at (u, v) lands at (u + du, v + dv) in the
    destination view.  Pixels with invalid depth or that land behind the
    destination camera are masked out.
    """
    h, w = depth.depth.shape
    uu, vv = _pixel_grid(w, h)
    z = depth.depth
    f_src = cam_src.intrinsics.focal
    x_cam = (uu - cam_src.intrinsics.cx) / f_src * z
    y_cam = (vv - cam_src.intrinsics.cy) / f_src * z

    pts_cam = np.stack([x_cam, y_cam, z], axis=-1).reshape(-1, 3)
    rot_src = cam_src.extrinsics.rotation.matrix()
    t_src = cam_src.extrinsics.translation
    pts_world = (pts_cam - t_src) @ rot_src

    rot_dst = cam_dst.extrinsics.rotation.matrix()
    pts_dst = pts_world @ rot_dst.T + cam_dst.extrinsics.translation
    z_dst = pts_dst[:, 2].reshape(h, w)
    in_front = z_dst > 0

    f_dst = cam_dst.intrinsics.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        u_dst = f_dst * pts_dst[:, 0].reshape(h, w) / z_dst + cam_dst.intrinsics.cx
        v_dst = f_dst * pts_dst[:, 1].reshape(h, w) / z_dst + cam_dst.intrinsics.cy

    flow = np.stack([u_dst - uu, v_dst - vv], axis=-1)
    valid = depth.valid & in_front
    flow[~valid] = 0.0
    return FlowField(flow, valid)


def _bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at pixel-center coordinates, edge-clamped."""
    h, w = img.shape[:2]
    x = np.clip(u - 0.5, 0.0, w - 1.0)
    y = np.clip(v - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def depth_reproject(
    img: np.ndarray,
    depth: DepthImage,
    cam_src: CameraState,
    cam_dst: CameraState,
) -> tuple[np.ndarray, np.ndarray]:
    """Reproject ``img`` from cam_src to cam_dst using per-pixel depth.

    Forward-splats 2x-supersampled source points with a z-buffer, then fills
    remaining holes by iterative 8-neighbor diffusion.  Returns the warped
    image (float) and a validity mask that is False on filled/empty pixels.
    """
    img = _as_image(img)
    h, w = depth.depth.shape
    if img.shape[:2] != (h, w):
        raise DimensionMismatch(f"image {img.shape[:2]} does not match depth {(h, w)}")

    # Each pixel spawns a 2x2 grid of subsamples carrying the parent pixel's
    # exact color and depth, so an identity reprojection reproduces the input
    # bit-for-bit and depth edges do not bleed interpolated values.
    step = 1.0 / _SPLAT_SUPERSAMPLE
    uu, vv = _pixel_grid(w, h, step)
    parent_x = np.floor(uu).astype(int)
    parent_y = np.floor(vv).astype(int)
    z = depth.depth[parent_y, parent_x]
    val = depth.valid[parent_y, parent_x]
    colors = img.astype(float)[parent_y, parent_x]

    f_src = cam_src.intrinsics.focal
    x_cam = (uu - cam_src.intrinsics.cx) / f_src * z
    y_cam = (vv - cam_src.intrinsics.cy) / f_src * z
    pts_cam = np.stack([x_cam, y_cam, z], axis=-1).reshape(-1, 3)
    pts_world = (pts_cam - cam_src.extrinsics.translation) @ cam_src.extrinsics.rotation.matrix()
    pts_dst = pts_world @ cam_dst.extrinsics.rotation.matrix().T + cam_dst.extrinsics.translation

    z_dst = pts_dst[:, 2]
    keep = val.ravel() & (z_dst > 0)
    pts_dst = pts_dst[keep]
    colors = colors.reshape(-1, img.shape[2])[keep]
    z_dst = z_dst[keep]

    f_dst = cam_dst.intrinsics.focal
    u_dst = f_dst * pts_dst[:, 0] / z_dst + cam_dst.intrinsics.cx
    v_dst = f_dst * pts_dst[:, 1] / z_dst + cam_dst.intrinsics.cy
    ix = np.floor(u_dst).astype(int)
    iy = np.floor(v_dst).astype(int)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    ix, iy, z_dst = ix[inside], iy[inside], z_dst[inside]
    colors = colors[inside]

    # Painter's z-buffer: sort far-to-near with a stable key so equal depths
    # resolve by submission order, then let nearer samples overwrite.
    order = np.argsort(-z_dst, kind="stable")
    flat = iy[order] * w + ix[order]
    out = np.zeros((h * w, img.shape[2]))
    out[flat] = colors[order]
    hit = np.zeros(h * w, dtype=bool)
    hit[flat] = True

    out = out.reshape(h, w, img.shape[2])
    hit = hit.reshape(h, w)
    filled = _diffuse_fill(out, hit)
    if img.shape[2] == 1 and np.asarray(img).ndim == 2:
        filled = filled[..., 0]
    return filled, hit


def _diffuse_fill(img: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill invalid pixels with the mean of valid 8-neighbors, iteratively."""
    out = img.copy()
    known = valid.copy()
    for _ in range(_MAX_FILL_ITERS):
        holes = ~known
        if not holes.any():
            break
        padded = np.pad(out, ((1, 1), (1, 1), (0, 0)))
        padded_known = np.pad(known, 1)
        acc = np.zeros_like(out)
        cnt = np.zeros(out.shape[:2])
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                shifted = padded[1 + dy : 1 + dy + out.shape[0], 1 + dx : 1 + dx + out.shape[1]]
                shifted_known = padded_known[
                    1 + dy : 1 + dy + out.shape[0], 1 + dx : 1 + dx + out.shape[1]
                ]
                acc += shifted * shifted_known[:, :, None]
                cnt += shifted_known
        fillable = holes & (cnt > 0)
        if not fillable.any():
            break
        out[fillable] = acc[fillable] / cnt[fillable][:, None]
        known |= fillable
    return out


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r, written on squared radii with U(0) = 0."""
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = 0.5 * r2[pos] * np.log(r2[pos])
    return out


@dataclass
class ThinPlateSpline:
    """Fitted 2D thin-plate spline mapping control points to displacements."""

    controls: np.ndarray
    weights: np.ndarray
    affine: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, 2)
        d2 = (
            np.sum(flat**2, axis=1)[:, None]
            - 2.0 * flat @ self.controls.T
            + np.sum(self.controls**2, axis=1)[None, :]
        )
        basis = _tps_kernel(np.maximum(d2, 0.0))
        ones = np.ones((flat.shape[0], 1))
        poly = np.concatenate([ones, flat], axis=1)
        values = basis @ self.weights + poly @ self.affine
        return values.reshape(points.shape)


def fit_tps(
    src: np.ndarray, dst: np.ndarray, regularization: float = _TPS_LAMBDA
) -> ThinPlateSpline:
    """Fit a thin-plate spline interpolating ``dst - src`` at ``src``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise DimensionMismatch(f"control shapes {src.shape} vs {dst.shape} must be (N, 2)")
    n = src.shape[0]
    if n < 4:
        raise DegenerateControlPoints(f"need >= 4 control points, got {n}")
    poly = np.concatenate([np.ones((n, 1)), src], axis=1)
    if np.linalg.matrix_rank(poly, tol=1e-9 * max(1.0, float(np.abs(src).max()))) < 3:
        raise DegenerateControlPoints("control points are collinear")

    d2 = (
        np.sum(src**2, axis=1)[:, None]
        - 2.0 * src @ src.T
        + np.sum(src**2, axis=1)[None, :]
    )
    kernel = _tps_kernel(np.maximum(d2, 0.0)) + regularization * np.eye(n)
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = kernel
    system[:n, n:] = poly
    system[n:, :n] = poly.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst - src
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateControlPoints(f"singular spline system: {exc}") from None
    return ThinPlateSpline(controls=src, weights=solution[:n], affine=solution[n:])


def _hull_radius(points: np.ndarray) -> tuple[np.ndarray, float]:
    center = points.mean(axis=0)
    radius = float(np.max(np.linalg.norm(points - center, axis=1)))
    return center, radius


def landmark_flow(
    src: LandmarkSet | np.ndarray,
    dst: LandmarkSet | np.ndarray,
    size: tuple[int, int],
    regularization: float = _TPS_LAMBDA,
    attenuate: bool = True,
) -> FlowField:
    """Dense flow interpolating landmark displacements via thin-plate spline.

    ``src``/``dst`` are matching landmark positions in pixels; ``size`` is
    (width, height).  The flow fades to zero with a cosine ramp between the
    landmark hull radius and 1.5x that radius, so distant pixels are untouched.
    """
    src_px = src.points if isinstance(src, LandmarkSet) else np.asarray(src, dtype=float)
    dst_px = dst.points if isinstance(dst, LandmarkSet) else np.asarray(dst, dtype=float)
    width, height = size
    spline = fit_tps(src_px, dst_px, regularization)

    uu, vv = _pixel_grid(width, height)
    grid = np.stack([uu, vv], axis=-1)
    flow = np.empty_like(grid)
    # Chunk rows to bound the (pixels x controls) kernel matrix size.
    chunk = max(1, int(2e6) // max(1, src_px.shape[0]) // width * width) or width
    flat = grid.reshape(-1, 2)
    out = np.empty_like(flat)
    for start in range(0, flat.shape[0], chunk):
        out[start : start + chunk] = spline(flat[start : start + chunk])
    flow = out.reshape(height, width, 2)

    if attenuate:
        center, radius = _hull_radius(src_px)
        if radius > 0:
            r = np.linalg.norm(grid - center, axis=-1)
            band = (_ATTENUATION_OUTER - 1.0) * radius
            ramp = np.clip((r - radius) / band, 0.0, 1.0)
            weight = 0.5 * (1.0 + np.cos(np.pi * ramp))
            weight[r <= radius] = 1.0
            weight[r >= _ATTENUATION_OUTER * radius] = 0.0
            flow *= weight[:, :, None]
    return FlowField(flow)


def blend(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Per-pixel convex combination ``fg * alpha + bg * (1 - alpha)``."""
    fg = _as_image(fg).astype(float)
    bg = _as_image(bg).astype(float)
    if fg.shape != bg.shape:
        raise DimensionMismatch(f"blend shapes differ: {fg.shape} vs {bg.shape}")
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != fg.shape[:2]:
        raise DimensionMismatch(f"alpha shape {alpha.shape} != image grid {fg.shape[:2]}")
    if alpha.min() < 0.0 or alpha.max() > 1.0:
        raise DimensionMismatch("alpha values must lie in [0, 1]")
    out = fg * alpha[:, :, None] + bg * (1.0 - alpha[:, :, None])
    return out


def _point_in_hull_mask(points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Binary mask of the convex hull of ``points`` over pixel centers."""
    # Half-plane test against every hull edge; the hull is built with a
    # standard monotone chain to avoid pulling in a geometry dependency.
    hull = _convex_hull(points)
    uu, vv = _pixel_grid(width, height)
    inside = np.ones((height, width), dtype=bool)
    n = hull.shape[0]
    for i in range(n):
        a = hull[i]
        b = hull[(i + 1) % n]
        cross = (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0])
        inside &= cross >= 0
    return inside


def _convex_hull(points: np.ndarray) -> np.ndarray:
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if pts.shape[0] < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(iterable):
        chain: list[np.ndarray] = []
        for p in iterable:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    padded = np.pad(img, radius, mode="edge")
    tmp = np.zeros((padded.shape[0], img.shape[1]))
    for k, wgt in enumerate(kernel):
        tmp += wgt * padded[:, k : k + img.shape[1]]
    out = np.zeros(img.shape)
    for k, wgt in enumerate(kernel):
        out += wgt * tmp[k : k + img.shape[0], :]
    return out


def face_hull_mask(
    landmarks_px: LandmarkSet | np.ndarray,
    size: tuple[int, int],
    feather_sigma: float = _HULL_FEATHER_SIGMA,
) -> np.ndarray:
    """Feathered convex-hull mask of the landmarks, values in [0, 1]."""
    pts = (
        landmarks_px.points
        if isinstance(landmarks_px, LandmarkSet)
        else np.asarray(landmarks_px, dtype=float)
    )
    width, height = size
    hard = _point_in_hull_mask(pts, width, height).astype(float)
    if feather_sigma > 0:
        return np.clip(_gaussian_blur(hard, feather_sigma), 0.0, 1.0)
    return hard


def warp_backward(img: np.ndarray, flow: FlowField) -> np.ndarray:
    """Sample ``img`` at positions displaced by ``flow`` (backward warping)."""
    img = _as_image(img).astype(float)
    h, w = flow.flow.shape[:2]
    if img.shape[:2] != (h, w):
        raise DimensionMismatch(f"image {img.shape[:2]} does not match flow grid {(h, w)}")
    uu, vv = _pixel_grid(w, h)
    return _bilinear_sample(img, uu + flow.flow[..., 0], vv + flow.flow[..., 1])


def correct_portrait(
    img: np.ndarray,
    depth: DepthImage | None,
    model: FaceModel,
    latent: FaceLatent,
    cam: CameraState,
    target_scale: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Re-render the frame as seen from ``target_scale`` times the distance.

    The background is depth-reprojected to the far camera; the face region is
    warped with a dense landmark-interpolated flow (exact at the landmarks);
    the two are blended with a feathered face-hull mask.  Returns the
    corrected image (float) and the background validity mask.
    """
    if depth is None:
        raise MissingInput("portrait correction needs a depth map (provide --depth)")
    if target_scale <= 0:
        raise DimensionMismatch(f"target_scale must be > 0, got {target_scale}")
    img = _as_image(img)
    h, w = img.shape[:2]
    if depth.depth.shape != (h, w):
        raise DimensionMismatch(f"depth {depth.depth.shape} does not match image {(h, w)}")

    cam_far = dolly_scale(cam, target_scale)
    near_px = render_landmarks(model, latent, cam).to_pixels(w, h)
    far_px = render_landmarks(model, latent, cam_far).to_pixels(w, h)

    bg, bg_valid = depth_reproject(img, depth, cam, cam_far)

    # Backward flow: for each output pixel, where to sample in the near image.
    flow_back = landmark_flow(far_px, near_px, (w, h))
    face = warp_backward(img, flow_back)

    alpha = face_hull_mask(far_px, (w, h))
    out = blend(face, bg, alpha)
    return out, bg_valid
