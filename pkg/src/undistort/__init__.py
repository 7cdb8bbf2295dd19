"""Portrait distance recovery and perspective re-rendering from landmarks.

The pipeline: fit a camera (pose, distance, focal) and a face shape jointly
to observed 2D landmarks, then re-render the photo as seen from a longer
distance — background by depth reprojection, face by landmark-driven dense
flow, joined with a feathered blend.
"""

from .errors import (
    InputError,
    NumericalError,
    UndistortError,
    UsageError,
)
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    CameraState,
    ReparamAnchor,
    Rotation,
    compute_alpha,
    project,
    rebase_anchor,
    set_distance,
    world_to_camera,
)
from .landmarks import LandmarkSet
from .facemodel import (
    DESIGNATED_LABELS,
    FaceLatent,
    FaceModel,
    eye_midpoint,
    render_landmarks,
    shape,
    synthesize_model,
)
from .objective import LossBreakdown, landmark_loss, loss_and_gradient, total_loss
from .solver import (
    ABLATION_VARIANTS,
    InversionProblem,
    InversionSolution,
    ScheduleConfig,
    ablation_config,
    solve,
)
from .synth import (
    SynthSpec,
    SyntheticInstance,
    distortion_score,
    generate,
    make_suite,
    problem_from_instance,
    render_scene,
)
from .warpstitch import (
    DepthImage,
    FlowField,
    align_depth,
    blend,
    correct_portrait,
    depth_reproject,
    landmark_flow,
)
from .metrics import (
    SimilarityTransform,
    evaluate_suite,
    landmark_error,
    procrustes_align,
    psnr,
    ssim,
)

__version__ = "1.0.0"

__all__ = [
    "ABLATION_VARIANTS",
    "CameraExtrinsics",
    "CameraIntrinsics",
    "CameraState",
    "DESIGNATED_LABELS",
    "DepthImage",
    "FaceLatent",
    "FaceModel",
    "FlowField",
    "InputError",
    "InversionProblem",
    "InversionSolution",
    "LandmarkSet",
    "LossBreakdown",
    "NumericalError",
    "ReparamAnchor",
    "Rotation",
    "ScheduleConfig",
    "SimilarityTransform",
    "SynthSpec",
    "SyntheticInstance",
    "UndistortError",
    "UsageError",
    "ablation_config",
    "align_depth",
    "blend",
    "compute_alpha",
    "correct_portrait",
    "depth_reproject",
    "distortion_score",
    "evaluate_suite",
    "eye_midpoint",
    "generate",
    "landmark_error",
    "landmark_flow",
    "landmark_loss",
    "loss_and_gradient",
    "make_suite",
    "problem_from_instance",
    "procrustes_align",
    "project",
    "psnr",
    "rebase_anchor",
    "render_landmarks",
    "render_scene",
    "set_distance",
    "shape",
    "solve",
    "ssim",
    "synthesize_model",
    "total_loss",
    "world_to_camera",
    "__version__",
]
