"""Command line interface: synth, invert, correct, dolly, eval, ablate."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import fileio
from .errors import MissingInput, UndistortError, UsageError
from .landmarks import LandmarkSet
from .metrics import aggregate, evaluate_suite, report_csv, report_json
from .solver import (
    ABLATION_VARIANTS,
    InversionProblem,
    ablation_config,
    solve,
)
from .synth import SynthSpec, generate, render_scene
from .geometry import dolly_scale, set_distance
from .warpstitch import correct_portrait

_ENV_SEED = "UNDISTORT_SEED"
_DEFAULT_SEED = 0
_DEFAULT_FAR_SCALE = 8.0


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting, for typed exit codes."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="undistort",
        description="Recover camera distance from facial landmarks and "
        "re-render portraits at a longer virtual distance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate synthetic problem instances")
    p.add_argument("--seed", type=int, default=None,
                   help=f"base seed (default: ${_ENV_SEED} or {_DEFAULT_SEED})")
    p.add_argument("--count", type=int, default=1, help="number of instances")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", type=float, default=0.0, help="landmark noise sigma (normalized)")
    p.add_argument("--size", default="512x512", help="image size WxH")
    p.add_argument("--scale", type=float, default=_DEFAULT_FAR_SCALE,
                   help="distance multiple for the far reference render")
    p.add_argument("--landmarks", type=int, default=468, help="landmarks per instance")
    p.add_argument("--latent-dim", type=int, default=32, help="deformation modes")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("invert", help="solve a problem file for camera and shape")
    p.add_argument("problem", help="problem JSON file")
    p.add_argument("--out", required=True, help="solution JSON output path")
    p.add_argument("--ablate", default=None, choices=list(ABLATION_VARIANTS),
                   help="run an ablation variant instead of the full method")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="single config override (repeatable)")
    p.add_argument("--trace", default=None, help="write per-iteration loss JSONL here")

    p = sub.add_parser("correct", help="re-render a portrait at a farther distance")
    p.add_argument("problem", help="problem JSON file")
    p.add_argument("solution", help="solution JSON from invert")
    p.add_argument("--image", required=True, help="input image (png/ppm)")
    p.add_argument("--depth", default=None, help="full-frame depth map (pfm/png)")
    p.add_argument("--scale", type=float, default=_DEFAULT_FAR_SCALE,
                   help="target distance as a multiple of the recovered distance")
    p.add_argument("--out", required=True, help="output image path")

    p = sub.add_parser("dolly", help="render a sequence of virtual distances")
    p.add_argument("problem")
    p.add_argument("solution")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", default=None)
    p.add_argument("--scales", default="1,2,4,8", help="comma-separated distance multiples")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="compute metrics over output/reference pairs")
    p.add_argument("--pairs", required=True, help="manifest JSON listing the pairs")
    p.add_argument("--out", required=True, help="CSV report path (JSON mirror alongside)")

    p = sub.add_parser("ablate", help="run the ablation grid over a suite directory")
    p.add_argument("--suite", required=True, help="directory produced by synth")
    p.add_argument("--out", required=True, help="CSV of per-instance distance errors")
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS),
                   help="comma-separated variants to run")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def _resolve_seed(flag_value):
    if flag_value is not None:
        return flag_value
    env = os.environ.get(_ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{_ENV_SEED} must be an integer, got {env!r}") from None
    return _DEFAULT_SEED


def _parse_size(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"--size must be WxH, got {text!r}")
    try:
        width, height = int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"--size must be WxH integers, got {text!r}") from None
    if width <= 0 or height <= 0:
        raise UsageError(f"--size must be positive, got {text!r}")
    return width, height


def _parse_overrides(pairs):
    values = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = fileio._parse_config_value(raw, 0)
    return values


# ---------------------------------------------------------------------------
# synth


def _synth_one(task):
    """Generate and write one instance; module-level for multiprocessing."""
    seed, spec_kwargs, out_dir, far_scale = task
    spec = SynthSpec(**spec_kwargs)
    inst = generate(seed, spec)
    tag = f"{seed:04d}"

    fileio.write_problem(
        os.path.join(out_dir, f"problem_{tag}.json"),
        inst.observed,
        spec.width,
        spec.height,
        "model.json",
    )
    gt = {
        "seed": seed,
        "true_distance": float(inst.true_distance),
        "true_f_px": float(inst.true_f_px),
        "true_f35": float(inst.true_f35),
        "true_w": [float(v) for v in inst.true_latent.w],
        "camera": fileio.camera_to_dict(inst.true_cam),
        "noise_sigma": float(spec.noise_sigma),
    }
    fileio.atomic_write_text(
        os.path.join(out_dir, f"gt_{tag}.json"),
        json.dumps(gt, sort_keys=True, indent=2) + "\n",
    )

    img, depth = render_scene(inst.model, inst.true_cam)
    fileio.write_ppm(os.path.join(out_dir, f"preview_{tag}.ppm"), img * 255.0)
    fileio.write_depth(os.path.join(out_dir, f"depth_{tag}.pfm"), depth)

    far_cam = set_distance(inst.true_cam, far_scale * inst.true_distance)
    far_img, _ = render_scene(inst.model, far_cam)
    fileio.write_ppm(os.path.join(out_dir, f"reference_{tag}.ppm"), far_img * 255.0)

    from .facemodel import render_landmarks

    far_set = render_landmarks(inst.model, inst.true_latent, far_cam)
    fileio.atomic_write_text(
        os.path.join(out_dir, f"reference_landmarks_{tag}.json"),
        json.dumps(
            {"points": [[float(u), float(v)] for u, v in far_set.points]},
            sort_keys=True,
            indent=2,
        )
        + "\n",
    )
    return seed


def _cmd_synth(args):
    seed = _resolve_seed(args.seed)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    width, height = _parse_size(args.size)
    os.makedirs(args.out, exist_ok=True)

    spec_kwargs = {
        "n_landmarks": args.landmarks,
        "latent_dim": args.latent_dim,
        "width": width,
        "height": height,
        "noise_sigma": args.noise,
    }
    spec = SynthSpec(**spec_kwargs)
    # One shared model per suite, written once.
    first = generate(seed, spec)
    fileio.write_model(os.path.join(args.out, "model.json"), first.model)

    tasks = [(seed + i, spec_kwargs, args.out, args.scale) for i in range(args.count)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_synth_one, tasks))
    else:
        for task in tasks:
            _synth_one(task)

    manifest = {
        "base_seed": seed,
        "count": args.count,
        "far_scale": args.scale,
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec_kwargs.items()},
    }
    fileio.atomic_write_text(
        os.path.join(args.out, "suite.json"), json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    print(f"wrote {args.count} instance(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# invert


def _load_problem(problem_path, ablate=None, config_path=None, overrides=None):
    doc = fileio.read_problem(problem_path)
    model = fileio.read_model(doc["model_path"])
    values = dict(doc["config"])
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as handle:
            values.update(fileio.parse_config_text(handle.read()))
    if overrides:
        values.update(overrides)
    config = fileio.build_schedule_config(values)
    if ablate is not None:
        config = ablation_config(config, ablate)
    problem = InversionProblem(
        observed=doc["observed"],
        model=model,
        width=doc["width"],
        height=doc["height"],
        config=config,
        init_camera=doc["init_camera"],
    )
    return problem, doc, model


def _cmd_invert(args):
    problem, _, _ = _load_problem(
        args.problem, args.ablate, args.config, _parse_overrides(args.overrides)
    )
    solution = solve(problem)
    fileio.write_solution(args.out, solution)
    fileio.atomic_write_text(args.out + ".config", fileio.render_config(solution.config))
    if args.trace:
        fileio.write_trace(args.trace, solution)
    final = solution.loss_trace[-1].total if solution.loss_trace else float("nan")
    print(f"distance {solution.distance:.6g} m, final loss {final:.6g}, wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# correct / dolly


def _load_correction_inputs(args):
    doc = fileio.read_problem(args.problem)
    model = fileio.read_model(doc["model_path"])
    loaded = fileio.read_solution(args.solution)
    img = fileio.read_image(args.image).astype(float)
    if img.dtype != float:
        img = img.astype(float)
    if img.max() > 1.0:
        img = img / 255.0
    if args.depth is None:
        raise MissingInput("portrait correction needs a depth map: pass --depth")
    depth = fileio.read_depth(args.depth)
    return model, loaded, img, depth


def _cmd_correct(args):
    model, loaded, img, depth = _load_correction_inputs(args)
    out, _ = correct_portrait(img, depth, model, loaded["latent"], loaded["cam"], args.scale)
    fileio.write_image(args.out, np.clip(out, 0.0, 1.0) * 255.0)

    from .facemodel import render_landmarks

    cam_far = dolly_scale(loaded["cam"], args.scale)
    far_set = render_landmarks(model, loaded["latent"], cam_far)
    fileio.atomic_write_text(
        args.out + ".landmarks.json",
        json.dumps(
            {"points": [[float(u), float(v)] for u, v in far_set.points]},
            sort_keys=True,
            indent=2,
        )
        + "\n",
    )
    print(f"corrected at x{args.scale:g} distance -> {args.out}")
    return 0


def _cmd_dolly(args):
    try:
        scales = [float(s) for s in args.scales.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--scales must be comma-separated numbers, got {args.scales!r}") from None
    if not scales:
        raise UsageError("--scales is empty")
    model, loaded, img, depth = _load_correction_inputs(args)
    os.makedirs(args.out, exist_ok=True)
    for index, scale in enumerate(scales):
        out, _ = correct_portrait(img, depth, model, loaded["latent"], loaded["cam"], scale)
        path = os.path.join(args.out, f"frame_{index:03d}_x{scale:g}.ppm")
        fileio.write_ppm(path, np.clip(out, 0.0, 1.0) * 255.0)
    print(f"wrote {len(scales)} frame(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_landmark_file(path):
    with open(path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    return LandmarkSet(points=np.asarray(doc["points"], dtype=float))


def _cmd_eval(args):
    with open(args.pairs, "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    if not isinstance(manifest, list) or not manifest:
        raise UsageError(f"manifest {args.pairs!r} must be a nonempty JSON list")
    base = os.path.dirname(os.path.abspath(args.pairs))

    def resolve(path):
        return path if os.path.isabs(path) else os.path.join(base, path)

    pairs = []
    masks = {}
    for entry in manifest:
        item_id = str(entry["id"])
        out_img = fileio.read_image(resolve(entry["output"]))
        ref_img = fileio.read_image(resolve(entry["reference"]))
        out_lms = ref_lms = None
        if "output_landmarks" in entry and "reference_landmarks" in entry:
            out_lms = _load_landmark_file(resolve(entry["output_landmarks"]))
            ref_lms = _load_landmark_file(resolve(entry["reference_landmarks"]))
        if "mask" in entry:
            masks[item_id] = fileio.read_image(resolve(entry["mask"])) > 127
        pairs.append((item_id, out_img, ref_img, out_lms, ref_lms))

    items = evaluate_suite(pairs, masks)
    fileio.atomic_write_text(args.out, report_csv(items))
    summary = {"items": report_json(items), "aggregate": aggregate(items)}
    fileio.atomic_write_text(
        os.path.splitext(args.out)[0] + ".json",
        json.dumps(summary, sort_keys=True, indent=2) + "\n",
    )
    agg = summary["aggregate"]
    print(
        f"evaluated {agg['count']} pair(s), {agg['failed']} failed; "
        f"mean PSNR {agg['psnr_db_mean']} dB, mean SSIM {agg['ssim_mean']}"
    )
    return 0


# ---------------------------------------------------------------------------
# ablate


def _ablate_one(task):
    """Solve one (problem, variant) pair; module-level for multiprocessing."""
    problem_path, gt_path, variant = task
    problem, _, _ = _load_problem(problem_path, ablate=variant)
    with open(gt_path, "r", encoding="utf-8") as handle:
        gt = json.load(handle)
    solution = solve(problem)
    true_d = float(gt["true_distance"])
    rel = abs(solution.distance - true_d) / true_d
    return variant, os.path.basename(problem_path), rel


def _cmd_ablate(args):
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = sorted(set(variants) - set(ABLATION_VARIANTS))
    if unknown:
        raise UsageError(
            f"unknown variants: {', '.join(unknown)} (choose from {', '.join(ABLATION_VARIANTS)})"
        )
    problems = sorted(
        name for name in os.listdir(args.suite)
        if name.startswith("problem_") and name.endswith(".json")
    )
    if not problems:
        raise MissingInput(f"no problem_*.json files under {args.suite!r}")
    tasks = []
    for variant in variants:
        for name in problems:
            gt_name = "gt_" + name[len("problem_"):]
            gt_path = os.path.join(args.suite, gt_name)
            if not os.path.exists(gt_path):
                raise MissingInput(f"missing ground truth {gt_path!r}")
            tasks.append((os.path.join(args.suite, name), gt_path, variant))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_one, tasks))
    else:
        results = [_ablate_one(task) for task in tasks]

    lines = ["variant,id,rel_distance_error"]
    for variant, item_id, rel in results:
        lines.append(f"{variant},{item_id},{rel:.6g}")
    fileio.atomic_write_text(args.out, "\n".join(lines) + "\n")

    summary = {}
    for variant in variants:
        errs = [rel for v, _, rel in results if v == variant]
        summary[variant] = {
            "count": len(errs),
            "median_rel_error": float(np.median(errs)),
            "p90_rel_error": float(np.percentile(errs, 90)),
        }
    fileio.atomic_write_text(
        os.path.splitext(args.out)[0] + ".summary.json",
        json.dumps(summary, sort_keys=True, indent=2) + "\n",
    )
    for variant in variants:
        stats = summary[variant]
        print(f"{variant}: median {stats['median_rel_error']:.4g} over {stats['count']}")
    return 0


# ---------------------------------------------------------------------------


_COMMANDS = {
    "synth": _cmd_synth,
    "invert": _cmd_invert,
    "correct": _cmd_correct,
    "dolly": _cmd_dolly,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UndistortError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        offset = getattr(exc, "offset", None)
        if offset is not None:
            record["offset"] = offset
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
