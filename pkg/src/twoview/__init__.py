"""Two-view structure from motion: five-point RANSAC pose and scale-invariant plane-sweep depth."""
from .data import DepthMap, FlowField, PixelMask, Trajectory
from .errors import (
    CheiralityError,
    DegenerateError,
    DegenerateSampleError,
    EstimationError,
    FileFormatError,
    InsufficientLengthError,
    NoParallaxError,
    TwoViewError,
)
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    decompose_essential,
    essential_from_pose,
    rigid_flow,
    sampson_distance,
    select_by_cheirality,
    triangulate,
)
from .fivepoint import five_point
from .losses import flow_loss, huber_depth_loss, scale_invariant_loss, total_loss
from .metrics import depth_metrics, kitti_vo_errors, pose_errors, umeyama_align
from .plane_sweep import HypothesisSchedule, build_cost_volume, extract_depth, sweep_depth, warp_candidates
from .pose import RansacConfig, apply_mask_strategy, estimate_pose_ransac
from .synthetic import SceneSpec, generate

__version__ = "0.1.0"
