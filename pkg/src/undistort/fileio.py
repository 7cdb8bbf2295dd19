"""File formats: images (PPM, PFM, PNG), model, solution, config, traces.

All writers go through an atomic temp-file + rename so a crashed run never
leaves a half-written artifact.  Float payloads that must survive a
round-trip (solutions, models, PFM depth) use formats that preserve them
bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import struct
import tempfile
import zlib
from typing import Any

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, DimensionMismatch, InvalidDimensions, ParseError
from .facemodel import FaceLatent, FaceModel
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    CameraState,
    ReparamAnchor,
    Rotation,
)
from .landmarks import LandmarkSet
from .solver import InversionSolution, ScheduleConfig
from .warpstitch import DepthImage

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# 16-bit depth PNG reserves the zero code for invalid pixels.
_DEPTH_CODES = 65535


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a same-directory temp file + rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PPM (binary P6)


def write_ppm(path: str, img: np.ndarray) -> None:
    """Write an 8-bit RGB image as binary PPM (P6)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch(f"PPM needs an HxWx3 image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + img.tobytes())


def _read_ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise ParseError("unexpected end of PPM header", offset=pos)
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        data = handle.read()
    magic, pos = _read_ppm_token(data, 0)
    if magic != b"P6":
        raise ParseError(f"not a binary PPM (magic {magic!r})", offset=0)
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise ParseError(f"bad PPM header token {token!r}", offset=pos - len(token)) from None
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported PPM maxval {maxval}", offset=pos)
    if w <= 0 or h <= 0:
        raise ParseError(f"bad PPM dimensions {w}x{h}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    if len(data) - pos < expected:
        raise ParseError(
            f"PPM payload truncated: need {expected} bytes, have {len(data) - pos}",
            offset=len(data),
        )
    return np.frombuffer(data[pos : pos + expected], dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# PFM (little-endian float32, bottom-up rows)


def write_pfm(path: str, depth: np.ndarray) -> None:
    """Write a single-channel float map as little-endian grayscale PFM."""
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise DimensionMismatch(f"PFM needs an HxW array, got shape {depth.shape}")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    atomic_write_bytes(path, header + depth[::-1].tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        data = handle.read()
    magic, pos = _read_ppm_token(data, 0)
    if magic != b"Pf":
        raise ParseError(f"not a grayscale PFM (magic {magic!r})", offset=0)
    token_w, pos = _read_ppm_token(data, pos)
    token_h, pos = _read_ppm_token(data, pos)
    token_s, pos = _read_ppm_token(data, pos)
    try:
        w, h = int(token_w), int(token_h)
        scale = float(token_s)
    except ValueError:
        raise ParseError("bad PFM header", offset=pos) from None
    if w <= 0 or h <= 0:
        raise ParseError(f"bad PFM dimensions {w}x{h}", offset=pos)
    pos += 1
    expected = w * h * 4
    if len(data) - pos < expected:
        raise ParseError(
            f"PFM payload truncated: need {expected} bytes, have {len(data) - pos}",
            offset=len(data),
        )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data[pos : pos + expected], dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# PNG (via Pillow, with an explicit chunk walk for typed parse errors)


def validate_png(data: bytes) -> None:
    """Walk the chunk structure, raising ParseError with byte offsets."""
    if not data.startswith(_PNG_SIGNATURE):
        raise ParseError("missing PNG signature", offset=0)
    pos = len(_PNG_SIGNATURE)
    seen_ihdr = False
    seen_iend = False
    while pos < len(data):
        if len(data) - pos < 8:
            raise ParseError("truncated PNG chunk header", offset=pos)
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        ctype = data[pos + 4 : pos + 8]
        if not re.fullmatch(rb"[A-Za-z]{4}", ctype):
            raise ParseError(f"bad PNG chunk type {ctype!r}", offset=pos + 4)
        if len(data) - pos < 12 + length:
            raise ParseError("truncated PNG chunk payload", offset=pos + 8)
        payload = data[pos + 8 : pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length : pos + 12 + length])
        if zlib.crc32(ctype + payload) & 0xFFFFFFFF != crc:
            raise ParseError(f"PNG chunk {ctype.decode()} CRC mismatch", offset=pos + 8 + length)
        if not seen_ihdr:
            if ctype != b"IHDR":
                raise ParseError("first PNG chunk is not IHDR", offset=pos + 4)
            seen_ihdr = True
        if ctype == b"IEND":
            seen_iend = True
            break
        pos += 12 + length
    if not seen_iend:
        raise ParseError("PNG missing IEND chunk", offset=len(data))


def write_png(path: str, img: np.ndarray) -> None:
    """Write an 8-bit RGB or 16-bit grayscale image as PNG."""
    img = np.asarray(img)
    if img.dtype == np.uint16:
        if img.ndim != 2:
            raise DimensionMismatch("16-bit PNG must be single-channel")
        pil = PILImage.fromarray(img)
    else:
        if img.dtype != np.uint8:
            img = np.clip(np.round(img), 0, 255).astype(np.uint8)
        if img.ndim == 2:
            pil = PILImage.fromarray(img, mode="L")
        elif img.ndim == 3 and img.shape[2] == 3:
            pil = PILImage.fromarray(img, mode="RGB")
        else:
            raise DimensionMismatch(f"unsupported PNG image shape {img.shape}")
    import io

    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        data = handle.read()
    validate_png(data)
    import io

    with PILImage.open(io.BytesIO(data)) as pil:
        pil.load()
        if pil.mode in ("I", "I;16"):
            return np.asarray(pil).astype(np.uint16)
        if pil.mode in ("L", "RGB"):
            return np.asarray(pil)
        return np.asarray(pil.convert("RGB"))


def read_image(path: str) -> np.ndarray:
    """Read PNG or PPM by extension."""
    lower = path.lower()
    if lower.endswith(".ppm"):
        return read_ppm(path)
    if lower.endswith(".png"):
        return read_png(path)
    raise ParseError(f"unsupported image extension on {path!r} (use .png or .ppm)")


def write_image(path: str, img: np.ndarray) -> None:
    lower = path.lower()
    if lower.endswith(".ppm"):
        write_ppm(path, img)
    elif lower.endswith(".png"):
        write_png(path, img)
    else:
        raise ParseError(f"unsupported image extension on {path!r} (use .png or .ppm)")


# ---------------------------------------------------------------------------
# Depth maps: PFM, or 16-bit PNG with a JSON scale/offset sidecar


def write_depth(path: str, depth: DepthImage) -> None:
    lower = path.lower()
    if lower.endswith(".pfm"):
        # Invalid pixels are stored as 0 (not a valid positive depth).
        payload = np.where(depth.valid, depth.depth, 0.0)
        write_pfm(path, payload)
    elif lower.endswith(".png"):
        valid = depth.valid
        if valid.any():
            lo = float(depth.depth[valid].min())
            hi = float(depth.depth[valid].max())
        else:
            lo, hi = 0.0, 1.0
        scale = (hi - lo) / (_DEPTH_CODES - 1) if hi > lo else 1.0
        codes = np.zeros(depth.depth.shape, dtype=np.uint16)
        quantized = np.round((depth.depth - lo) / scale).astype(np.int64) + 1
        codes[valid] = np.clip(quantized[valid], 1, _DEPTH_CODES)
        write_png(path, codes)
        sidecar = {"scale": scale, "offset": lo, "invalid_code": 0}
        atomic_write_text(path + ".json", json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    else:
        raise ParseError(f"unsupported depth extension on {path!r} (use .pfm or .png)")


def read_depth(path: str) -> DepthImage:
    lower = path.lower()
    if lower.endswith(".pfm"):
        arr = read_pfm(path).astype(float)
        valid = arr > 0
        return DepthImage(np.where(valid, arr, 0.0), valid)
    if lower.endswith(".png"):
        codes = read_png(path)
        if codes.dtype != np.uint16:
            raise ParseError(f"depth PNG {path!r} is not 16-bit")
        sidecar_path = path + ".json"
        if not os.path.exists(sidecar_path):
            raise ParseError(f"depth PNG {path!r} is missing its {sidecar_path!r} sidecar")
        with open(sidecar_path, "r", encoding="utf-8") as handle:
            sidecar = json.load(handle)
        scale = float(sidecar["scale"])
        offset = float(sidecar["offset"])
        valid = codes != int(sidecar.get("invalid_code", 0))
        depth = (codes.astype(float) - 1) * scale + offset
        return DepthImage(np.where(valid, depth, 0.0), valid)
    raise ParseError(f"unsupported depth extension on {path!r} (use .pfm or .png)")


# ---------------------------------------------------------------------------
# Face model: JSON header + same-stem .bin with float64 mean then basis


def write_model(path: str, model: FaceModel) -> None:
    if not path.endswith(".json"):
        raise ParseError(f"model path must end in .json, got {path!r}")
    bin_path = path[:-5] + ".bin"
    payload = model.mean_shape.astype("<f8").tobytes() + model.basis.astype("<f8").tobytes()
    header = {
        "format": "landmark-face-model-v1",
        "n_landmarks": model.n_landmarks,
        "latent_dim": model.latent_dim,
        "labels": list(model.labels),
        "eye_indices": list(model.eye_indices),
        "data_file": os.path.basename(bin_path),
        "data_sha256": hashlib.sha256(payload).hexdigest(),
    }
    atomic_write_bytes(bin_path, payload)
    atomic_write_text(path, json.dumps(header, sort_keys=True, indent=2) + "\n")


def read_model(path: str) -> FaceModel:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            header = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ParseError(f"model header {path!r}: {exc}", offset=exc.pos) from None
    for key in ("format", "n_landmarks", "latent_dim", "labels", "eye_indices", "data_file"):
        if key not in header:
            raise ParseError(f"model header {path!r} missing key {key!r}")
    if header["format"] != "landmark-face-model-v1":
        raise ParseError(f"unsupported model format {header['format']!r}")
    n = int(header["n_landmarks"])
    k = int(header["latent_dim"])
    bin_path = os.path.join(os.path.dirname(os.path.abspath(path)), header["data_file"])
    with open(bin_path, "rb") as handle:
        payload = handle.read()
    expected = (n * 3 + k * n * 3) * 8
    if len(payload) != expected:
        raise ParseError(
            f"model data {bin_path!r} has {len(payload)} bytes, expected {expected}",
            offset=min(len(payload), expected),
        )
    digest = header.get("data_sha256")
    if digest is not None and hashlib.sha256(payload).hexdigest() != digest:
        raise ParseError(f"model data {bin_path!r} does not match header checksum")
    mean = np.frombuffer(payload[: n * 24], dtype="<f8").reshape(n, 3).copy()
    basis = np.frombuffer(payload[n * 24 :], dtype="<f8").reshape(k, n, 3).copy()
    return FaceModel(
        mean_shape=mean,
        basis=basis,
        eye_indices=tuple(int(i) for i in header["eye_indices"]),
        labels=list(header["labels"]),
    )


# ---------------------------------------------------------------------------
# Problem files


def write_problem(path: str, observed: LandmarkSet, width: int, height: int,
                  model_path: str, detector_sigma: Any = None,
                  config_overrides: dict | None = None,
                  init_camera: CameraState | None = None) -> None:
    doc = {
        "format": "inversion-problem-v1",
        "image_size": [int(width), int(height)],
        "landmarks": [[float(u), float(v)] for u, v in observed.points],
        "visibility": [bool(b) for b in observed.visibility],
        "model_path": model_path,
    }
    if detector_sigma is not None:
        sigma = np.asarray(detector_sigma, dtype=float)
        doc["detector_sigma"] = float(sigma) if sigma.ndim == 0 else [float(s) for s in sigma]
    else:
        doc["detector_sigma"] = [float(s) for s in observed.sigma]
    if config_overrides:
        doc["config"] = dict(config_overrides)
    if init_camera is not None:
        doc["init_camera"] = camera_to_dict(init_camera)
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_problem(path: str) -> dict:
    """Parse and validate a problem file; model loading is the caller's job.

    Returns a dict with keys: observed (LandmarkSet), width, height,
    model_path (resolved relative to the problem file), config (dict).
    """
    with open(path, "r", encoding="utf-8") as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ParseError(f"problem file {path!r}: {exc}", offset=exc.pos) from None
    for key in ("image_size", "landmarks", "model_path"):
        if key not in doc:
            raise ParseError(f"problem file {path!r} missing key {key!r}")
    size = doc["image_size"]
    if (not isinstance(size, list)) or len(size) != 2:
        raise ParseError(f"problem file {path!r}: image_size must be [width, height]")
    width, height = int(size[0]), int(size[1])
    if width <= 0 or height <= 0:
        raise InvalidDimensions(f"problem file {path!r}: bad image size {width}x{height}")
    pts = np.asarray(doc["landmarks"], dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ParseError(f"problem file {path!r}: landmarks must be an Nx2 list")
    if pts.size and (pts.min() < 0.0 or pts.max() > 1.0):
        raise ParseError(f"problem file {path!r}: landmark coordinates must lie in [0, 1]")
    visibility = doc.get("visibility")
    if visibility is not None:
        visibility = np.asarray(visibility, dtype=bool)
    sigma = doc.get("detector_sigma", 0.01)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = np.full(pts.shape[0], float(sigma))
    observed = LandmarkSet(points=pts, visibility=visibility, sigma=sigma)
    model_path = doc["model_path"]
    if not os.path.isabs(model_path):
        model_path = os.path.join(os.path.dirname(os.path.abspath(path)), model_path)
    init_camera = None
    if "init_camera" in doc:
        init_camera = camera_from_dict(doc["init_camera"])
    return {
        "observed": observed,
        "width": width,
        "height": height,
        "model_path": model_path,
        "config": dict(doc.get("config", {})),
        "init_camera": init_camera,
    }


# ---------------------------------------------------------------------------
# Camera / solution serialization (bit-exact float round trip via repr)


def camera_to_dict(cam: CameraState) -> dict:
    return {
        "axis_angle": [float(v) for v in cam.extrinsics.rotation.axis_angle],
        "t_x": float(cam.extrinsics.translation[0]),
        "t_y": float(cam.extrinsics.translation[1]),
        "anchor": {
            "t_z0": float(cam.anchor.t_z0),
            "d0": float(cam.anchor.d0),
            "delta_tz": float(cam.anchor.delta_tz),
        },
        "f0": float(cam.intrinsics.f0),
        "gamma": float(cam.intrinsics.gamma),
        "cx": float(cam.intrinsics.cx),
        "cy": float(cam.intrinsics.cy),
        "width": int(cam.intrinsics.width),
        "height": int(cam.intrinsics.height),
    }


def camera_from_dict(doc: dict) -> CameraState:
    try:
        anchor = ReparamAnchor(
            t_z0=float(doc["anchor"]["t_z0"]),
            d0=float(doc["anchor"]["d0"]),
            delta_tz=float(doc["anchor"]["delta_tz"]),
        )
        return CameraState.assemble(
            Rotation(np.asarray(doc["axis_angle"], dtype=float)),
            float(doc["t_x"]),
            float(doc["t_y"]),
            anchor,
            f0=float(doc["f0"]),
            gamma=float(doc["gamma"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )
    except KeyError as exc:
        raise ParseError(f"camera record missing key {exc}") from None


def solution_to_dict(solution: InversionSolution) -> dict:
    residual = solution.latent.residual
    return {
        "format": "inversion-solution-v1",
        "camera": camera_to_dict(solution.cam),
        "latent": {
            "w": [float(v) for v in solution.latent.w],
            "residual": [[float(c) for c in row] for row in residual],
        },
        "sigmas": [float(s) for s in solution.sigmas],
        "distance": float(solution.distance),
        "stages": {k: [int(a), int(b)] for k, (a, b) in solution.stages.items()},
        "init": {k: _jsonify(v) for k, v in solution.init_info.items()},
        "config": dataclasses.asdict(solution.config),
        "final_loss": solution.loss_trace[-1].as_dict() if solution.loss_trace else None,
    }


def _jsonify(value):
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_jsonify(v) for v in value]
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    return value


def write_solution(path: str, solution: InversionSolution) -> None:
    atomic_write_text(path, json.dumps(solution_to_dict(solution), sort_keys=True, indent=2) + "\n")


def read_solution(path: str) -> dict:
    """Load a solution file into plain Python structures.

    Returns a dict with keys: cam (CameraState), latent (FaceLatent),
    sigmas (array), distance (float), config (ScheduleConfig), raw (dict).
    """
    with open(path, "r", encoding="utf-8") as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ParseError(f"solution file {path!r}: {exc}", offset=exc.pos) from None
    if doc.get("format") != "inversion-solution-v1":
        raise ParseError(f"solution file {path!r}: unsupported format {doc.get('format')!r}")
    cam = camera_from_dict(doc["camera"])
    latent = FaceLatent(
        w=np.asarray(doc["latent"]["w"], dtype=float),
        residual=np.asarray(doc["latent"]["residual"], dtype=float),
    )
    config_doc = dict(doc.get("config", {}))
    known = {f.name for f in dataclasses.fields(ScheduleConfig)}
    config = ScheduleConfig(**{
        k: (tuple(v) if isinstance(v, list) else v) for k, v in config_doc.items() if k in known
    })
    return {
        "cam": cam,
        "latent": latent,
        "sigmas": np.asarray(doc["sigmas"], dtype=float),
        "distance": float(doc["distance"]),
        "config": config,
        "raw": doc,
    }


def write_trace(path: str, solution: InversionSolution) -> None:
    """Per-iteration loss breakdowns as JSON lines."""
    lines = []
    for i, item in enumerate(solution.loss_trace):
        record = {"iter": i}
        record.update(item.as_dict())
        lines.append(json.dumps(record, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Config files: TOML-style `key = value` lines


_CONFIG_BOOL = {"true": True, "false": False}


def _parse_config_value(raw: str, line_no: int):
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"line {line_no}: empty value")
    low = raw.lower()
    if low in _CONFIG_BOOL:
        return _CONFIG_BOOL[low]
    if "," in raw:
        return tuple(_parse_config_value(part, line_no) for part in raw.split(","))
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    values: dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", key):
            raise ConfigError(f"line {line_no}: bad key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _parse_config_value(raw, line_no)
    return values


def build_schedule_config(overrides: dict) -> ScheduleConfig:
    """ScheduleConfig from override dict; unknown keys are errors."""
    known = {f.name for f in dataclasses.fields(ScheduleConfig)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ScheduleConfig(**overrides)


def load_config(path: str | None, extra_overrides: dict | None = None) -> ScheduleConfig:
    values: dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            values.update(parse_config_text(handle.read()))
    if extra_overrides:
        values.update(extra_overrides)
    return build_schedule_config(values)


def render_config(config: ScheduleConfig) -> str:
    """Resolved config as a reloadable ``key = value`` document."""
    lines = ["# resolved configuration"]
    for field in dataclasses.fields(ScheduleConfig):
        value = getattr(config, field.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ", ".join(repr(v) for v in value)
        else:
            text = repr(value)
        lines.append(f"{field.name} = {text}")
    return "\n".join(lines) + "\n"
