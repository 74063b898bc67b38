"""Command-line front end: ``twoview {synth,estimate-pose,sweep-depth,evaluate,pipeline}``.

Every command accepts ``--config FILE``, a flat ``key=value`` file whose keys
are the long option names (dashes or underscores).  Options given on the
command line override the file.  Outputs go to ``--out`` only.

Exit codes: 0 success, 1 I/O or configuration error, 2 degenerate input or
failed estimation.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flow_io, synthetic
from .data import DepthMap
from .errors import DegenerateError, EstimationError, TwoViewError
from .geometry import RigidTransform
from .metrics import (
    KITTI_BASELINE_M,
    SCALINGS,
    depth_metrics,
    format_report,
    kitti_vo_errors,
    pose_errors,
)
from .plane_sweep import COST_FUNCTIONS, MODES, SOFT_TAU, HypothesisSchedule, reconcile_scale, sweep_depth
from .pose import MASK_STRATEGIES, RansacConfig, apply_mask_strategy, estimate_pose_ransac

LOW_CONFIDENCE = 0.05


class ConfigError(TwoViewError, ValueError):
    pass


class StageError(Exception):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


@dataclass(frozen=True)
class Opt:
    name: str
    type: type = str
    default: object = None
    choices: tuple | None = None
    help: str = ""
    in_manifest: bool = True

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


RANSAC_OPTS = [
    Opt("mask", str, "all", MASK_STRATEGIES + ("keypoint_locations", "weight_threshold"), "correspondence mask strategy"),
    Opt("grid-stride", int, 2, help="pixel stride for --mask grid"),
    Opt("weights", str, None, help="weight map (PFM/PNG) for --mask weights"),
    Opt("weight-tau", float, 0.5, help="keep pixels with weight >= tau"),
    Opt("ransac-threshold", float, 1.0, help="Sampson inlier threshold in squared pixels"),
    Opt("confidence", float, 0.999, help="RANSAC target confidence"),
    Opt("max-iters", int, 1000, help="RANSAC iteration cap"),
    Opt("min-iters", int, 20, help="RANSAC iteration floor"),
    Opt("refit-samples", int, 50, help="minimal refits on the consensus set"),
    Opt("polish", _bool, True, help="robust on-manifold least-squares polish of the final pose"),
]
SWEEP_OPTS = [
    Opt("hypotheses", int, 64, help="number of depth hypotheses L"),
    Opt("dmin", float, 1.0, help="nearest hypothesis depth in units of the baseline"),
    Opt("mode", str, "hard", MODES, "depth extraction"),
    Opt("cost", str, "sad", COST_FUNCTIONS, "patch cost"),
    Opt("tau", float, SOFT_TAU, help="soft-argmin temperature"),
    Opt("gt-scale", float, None, help="ground-truth baseline length; writes metric depth"),
]
COMMON_OPTS = [
    Opt("seed", int, 0, help="seed for all randomness"),
    Opt("threads", int, 1, help="worker threads (results do not depend on it)", in_manifest=False),
]

COMMANDS = {
    "synth": [
        Opt("kind", str, "textured_plane", synthetic.KINDS),
        Opt("width", int, 320),
        Opt("height", int, 240),
        Opt("pose", str, None, help="'random' or 12 numbers of a 3x4 [R|t]; default depends on --kind"),
        Opt("max-rotation-deg", float, 10.0, help="rotation bound for a random pose"),
        Opt("baseline", float, 0.5, help="translation length for a random pose"),
        Opt("n-points", int, 500),
        Opt("depth-near", float, 2.0),
        Opt("depth-far", float, 10.0),
        Opt("plane-depth", float, 5.0),
        Opt("plane-depths", str, "3 6", help="two depths for --kind two_planes"),
        Opt("split", float, 0.5),
        Opt("texture-seed", int, 0),
        Opt("flat-fraction", float, 0.0),
        Opt("noise", float, 0.0, help="Gaussian match noise (px)"),
        Opt("outlier-ratio", float, 0.0),
        Opt("outlier-mode", str, "uniform", synthetic.OUTLIER_MODES),
    ] + COMMON_OPTS,
    "estimate-pose": [
        Opt("flow", str, None, help="flow field (.flo)"),
        Opt("intrinsics", str, None, help="'fx fy cx cy' text or KITTI calibration"),
        Opt("image1", str, None, help="view-1 image (needed by --mask keypoints)"),
    ] + RANSAC_OPTS + COMMON_OPTS,
    "sweep-depth": [
        Opt("image1", str, None),
        Opt("image2", str, None),
        Opt("intrinsics", str, None),
        Opt("pose", str, None, help="relative pose file (first line used)"),
        Opt("flow", str, None, help="flow to estimate the pose from when --pose is absent"),
        Opt("gt-depth", str, None, help="reference depth; adds Abs Rel to the report"),
        Opt("eval-mask", str, None, help="PNG mask restricting depth evaluation"),
    ] + SWEEP_OPTS + RANSAC_OPTS + COMMON_OPTS,
    "evaluate": [
        Opt("pred", str, None),
        Opt("gt", str, None),
        Opt("scaling", str, "none", SCALINGS),
        Opt("gt-scale", float, None),
        Opt("intrinsics", str, None, help="focal length source for d1_all"),
        Opt("baseline", float, KITTI_BASELINE_M, help="stereo baseline for d1_all (m)"),
        Opt("eval-mask", str, None, help="PNG mask restricting depth evaluation"),
    ],
    "pipeline": [
        Opt("flow", str, None),
        Opt("image1", str, None),
        Opt("image2", str, None),
        Opt("intrinsics", str, None),
        Opt("gt-depth", str, None),
        Opt("eval-mask", str, None, help="PNG mask restricting depth evaluation"),
        Opt("gt-pose", str, None),
        Opt("scaling", str, "none", SCALINGS),
    ] + RANSAC_OPTS + SWEEP_OPTS + COMMON_OPTS,
}
EVALUATE_KINDS = ("depth", "pose", "trajectory")


# ---------------------------------------------------------------- config plumbing

def read_config(path) -> dict:
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(opts, cli: argparse.Namespace, config: dict) -> dict:
    """Merge defaults < config file < command line, converting and validating values."""
    known = {o.key for o in opts} | {"command", "kind_of_evaluation"}
    unknown = sorted(set(config) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for o in opts:
        v = getattr(cli, o.key, None)
        if v is None and o.key in config and config[o.key] not in ("", "None"):
            try:
                v = o.type(config[o.key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {o.key}: {config[o.key]!r}") from exc
        if v is None:
            v = o.default
        if o.choices and v is not None and v not in o.choices:
            raise ConfigError(f"{o.key} must be one of {o.choices}, got {v!r}")
        out[o.key] = v
    return out


def write_manifest(path: Path, command: str, opts, values: dict) -> None:
    lines = [f"command={command}"]
    for o in opts:
        if o.in_manifest:
            v = values[o.key]
            lines.append(f"{o.key}={'' if v is None else (flow_io.fmt(v) if isinstance(v, float) else v)}")
    path.write_text("\n".join(lines) + "\n")


def _need(values: dict, *keys):
    missing = [k for k in keys if not values.get(k)]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(path) -> Path:
    if not path:
        raise ConfigError("missing required option: --out")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- shared stages

def _ransac_config(v: dict) -> RansacConfig:
    return RansacConfig(
        inlier_threshold=v["ransac_threshold"],
        confidence=v["confidence"],
        max_iterations=v["max_iters"],
        min_iterations=v["min_iters"],
        refit_samples=v["refit_samples"],
        polish=v["polish"],
        seed=v["seed"],
        threads=v["threads"],
    )


def _estimate(v: dict, flow_path: str, image1_path: str | None):
    flow = flow_io.read_flow(flow_path)
    K = flow_io.read_intrinsics(v["intrinsics"])
    strategy = v["mask"]
    aux = None
    params = {}
    if strategy in ("keypoints", "keypoint_locations"):
        if not image1_path:
            raise ConfigError("--mask keypoints needs --image1")
        aux = flow_io.read_image(image1_path)
    elif strategy in ("weights", "weight_threshold"):
        if not v.get("weights"):
            raise ConfigError("--mask weights needs --weights")
        aux = flow_io.read_weights(v["weights"])
        params["tau"] = v["weight_tau"]
    elif strategy == "grid":
        params["stride"] = v["grid_stride"]
    x1, x2 = apply_mask_strategy(flow, strategy, aux, **params)
    return estimate_pose_ransac(x1, x2, K, _ransac_config(v)), K


def _pose_stats(est) -> dict:
    return {
        "n_inliers": est.n_inliers,
        "n_matches": int(est.inlier_mask.size),
        "iterations": est.iterations_run,
        "mean_inlier_sampson": est.mean_inlier_sampson,
        "low_parallax": int(est.low_parallax),
    }


def _read_pose(path) -> RigidTransform:
    traj = flow_io.read_trajectory(path)
    if not traj.poses:
        raise ConfigError(f"{path}: no pose found")
    return traj.poses[0]


def _sweep(v: dict, K, pose: RigidTransform, out: Path):
    img1 = flow_io.read_image(v["image1"])
    img2 = flow_io.read_image(v["image2"])
    schedule = HypothesisSchedule(v["hypotheses"], v["dmin"])
    result, _ = sweep_depth(img1, img2, K, pose, schedule, cost_fn=v["cost"], mode=v["mode"], tau=v["tau"],
                            threads=v["threads"])
    flow_io.write_depth(out / "depth.pfm", result.depth)
    flow_io.write_pfm(out / "confidence.pfm", result.confidence)
    depth = result.depth
    if v.get("gt_scale") is not None:
        depth = reconcile_scale(result.depth, v["gt_scale"])
        flow_io.write_depth(out / "depth_metric.pfm", depth)
    mean_conf = float(result.confidence[result.depth.valid].mean()) if result.depth.valid.any() else 0.0
    if mean_conf < LOW_CONFIDENCE:
        _warn(f"mean matching confidence {mean_conf:.3g} is near zero; images may lack texture")
    stats = {"mean_confidence": mean_conf, "valid_fraction": float(result.depth.valid.mean())}
    return result, depth, schedule, stats


def _read_gt_depth(v: dict) -> DepthMap:
    """Reference depth, restricted to ``--eval-mask`` when given."""
    gt = flow_io.read_depth(v["gt_depth"] if "gt_depth" in v else v["gt"])
    if v.get("eval_mask"):
        mask = flow_io.read_mask(v["eval_mask"]).mask
        if mask.shape != gt.shape:
            raise ConfigError(f"eval mask shape {mask.shape} does not match depth shape {gt.shape}")
        gt = DepthMap(gt.depth, gt.valid & mask)
    return gt


def _depth_eval(pred: DepthMap, gt: DepthMap, scaling: str, alpha, K, baseline=KITTI_BASELINE_M):
    return depth_metrics(pred, gt, scaling, alpha=alpha, focal=K.fx if K is not None else None, baseline=baseline)


# ---------------------------------------------------------------- commands

def cmd_synth(v: dict, out: Path) -> int:
    w, h = v["width"], v["height"]
    rng = np.random.default_rng(v["seed"])
    pose_arg = v["pose"]
    if pose_arg is None:
        pose_arg = "random" if v["kind"] == "point_cloud" else None
    if pose_arg == "random":
        pose = synthetic.random_pose(rng, max_angle_deg=v["max_rotation_deg"], baseline=v["baseline"])
    elif pose_arg is None:
        pose = RigidTransform(np.eye(3), [v["baseline"], 0.0, 0.0])
    else:
        pose = flow_io.parse_pose_line(pose_arg, "--pose")
    try:
        depths = tuple(float(x) for x in v["plane_depths"].replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError("--plane-depths needs two numbers") from exc
    if len(depths) != 2:
        raise ConfigError("--plane-depths needs two numbers")
    spec = synthetic.SceneSpec(
        kind=v["kind"], image_size=(w, h), pose=pose, depth_range=(v["depth_near"], v["depth_far"]),
        n_points=v["n_points"], plane_depth=v["plane_depth"], plane_depths=depths, split=v["split"],
        texture_seed=v["texture_seed"], flat_fraction=v["flat_fraction"], noise_px=v["noise"],
        outlier_ratio=v["outlier_ratio"], outlier_mode=v["outlier_mode"], seed=v["seed"],
    )
    sample = synthetic.generate(spec)
    synthetic.export_sample(sample, out)
    print(f"wrote {sample.spec.kind} sample to {out} ({sample.n_outliers} outliers)")
    return 0


def cmd_estimate_pose(v: dict, out: Path) -> int:
    _need(v, "flow", "intrinsics")
    est, _ = _estimate(v, v["flow"], v.get("image1"))
    flow_io.write_trajectory(out / "pose.txt", [est.pose])
    stats = _pose_stats(est)
    flow_io.write_metrics(out / "pose_stats.txt", stats)
    (out / "report.txt").write_text(format_report("relative pose (|t| = 1)", stats))
    if est.low_parallax:
        _warn("median inlier flow below 0.5 px; translation direction is unreliable")
    sys.stdout.write(format_report("relative pose (|t| = 1)", stats))
    return 0


def cmd_sweep_depth(v: dict, out: Path) -> int:
    _need(v, "image1", "image2", "intrinsics")
    K = flow_io.read_intrinsics(v["intrinsics"])
    if v.get("pose"):
        pose = _read_pose(v["pose"])
    elif v.get("flow"):
        est, _ = _estimate(v, v["flow"], v["image1"])
        pose = est.pose
        flow_io.write_trajectory(out / "pose.txt", [pose])
    else:
        raise ConfigError("sweep-depth needs --pose or --flow")
    result, depth, schedule, stats = _sweep(v, K, pose, out)
    if v.get("gt_depth"):
        # The sweep runs at |t| = 1; the reference scale comes from --gt-scale,
        # else from a supplied pose file, else from median matching.
        gt = _read_gt_depth(v)
        alpha = v.get("gt_scale")
        if alpha is None and v.get("pose"):
            alpha = float(np.linalg.norm(pose.translation))
        if alpha is None:
            alpha = float(np.median(gt.depth[gt.valid & result.depth.valid])
                          / np.median(result.depth.depth[gt.valid & result.depth.valid]))
        m = _depth_eval(result.depth, gt, "gt", alpha, None)
        stats["abs_rel"] = m.abs_rel
        stats["quantization_bound"] = schedule.quantization_bound(gt.depth[gt.valid] / alpha)
    flow_io.write_metrics(out / "sweep_stats.txt", stats)
    report = format_report(f"plane sweep ({result.mode}, L={schedule.L}, d_min={schedule.d_min:g})", stats)
    (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_evaluate(kind: str, v: dict, out: Path) -> int:
    _need(v, "pred", "gt")
    if kind == "depth":
        pred = flow_io.read_depth(v["pred"])
        gt = _read_gt_depth(v)
        if pred.shape != gt.shape:
            raise ConfigError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
        K = flow_io.read_intrinsics(v["intrinsics"]) if v.get("intrinsics") else None
        metrics = _depth_eval(pred, gt, v["scaling"], v.get("gt_scale"), K, v["baseline"]).as_dict()
    elif kind == "pose":
        metrics = pose_errors(_read_pose(v["pred"]), _read_pose(v["gt"])).as_dict()
    else:
        metrics = kitti_vo_errors(flow_io.read_trajectory(v["pred"]), flow_io.read_trajectory(v["gt"])).as_dict()
    flow_io.write_metrics(out / "metrics.txt", metrics)
    report = format_report(f"{kind} evaluation", metrics)
    (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    return 0


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except (TwoViewError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc


def cmd_pipeline(v: dict, out: Path) -> int:
    _need(v, "flow", "image1", "image2", "intrinsics")
    write_manifest(out / "manifest.txt", "pipeline", COMMANDS["pipeline"], v)
    est, K = _stage("pose", _estimate, v, v["flow"], v["image1"])
    flow_io.write_trajectory(out / "pose.txt", [est.pose])
    stats = {f"pose_{k}": val for k, val in _pose_stats(est).items()}
    result, depth, schedule, sweep_stats = _stage("sweep", _sweep, v, K, est.pose, out)
    stats.update(sweep_stats)
    metrics = {}
    if v.get("gt_pose"):
        gt_pose = _stage("evaluate", _read_pose, v["gt_pose"])
        metrics.update(_stage("evaluate", pose_errors, est.pose, gt_pose).as_dict())
    if v.get("gt_depth"):
        gt = _stage("evaluate", _read_gt_depth, v)
        dm = _stage("evaluate", _depth_eval, result.depth, gt, v["scaling"], v.get("gt_scale"), K)
        metrics.update(dm.as_dict())
    flow_io.write_metrics(out / "stats.txt", stats)
    if metrics:
        flow_io.write_metrics(out / "metrics.txt", metrics)
    report = format_report("pipeline", {**stats, **metrics})
    (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    return 0


# ---------------------------------------------------------------- entry point

def _add_opts(p: argparse.ArgumentParser, opts) -> None:
    p.add_argument("--config", help="flat key=value file; command-line options take precedence")
    p.add_argument("--out", help="output directory (the only place anything is written)")
    for o in opts:
        kw = {"dest": o.key, "default": None, "help": o.help or None}
        if o.type is _bool:
            kw["type"] = _bool
        else:
            kw["type"] = o.type
        if o.choices:
            kw["choices"] = o.choices
        p.add_argument("--" + o.name, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twoview", description="Two-view pose and scale-invariant depth.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        if name == "evaluate":
            p.add_argument("kind_of_evaluation", choices=EVALUATE_KINDS)
        _add_opts(p, opts)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = read_config(args.config) if args.config else {}
        config_command = config.pop("command", None)
        if config_command and config_command != args.command:
            raise ConfigError(f"config was written for '{config_command}', not '{args.command}'")
        opts = COMMANDS[args.command]
        values = resolve(opts, args, config)
        out = _out_dir(args.out)
        if args.command == "synth":
            return cmd_synth(values, out)
        if args.command == "estimate-pose":
            return cmd_estimate_pose(values, out)
        if args.command == "sweep-depth":
            return cmd_sweep_depth(values, out)
        if args.command == "evaluate":
            return cmd_evaluate(args.kind_of_evaluation, values, out)
        return cmd_pipeline(values, out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.exc, (EstimationError, DegenerateError)) else 1
    except (EstimationError, DegenerateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TwoViewError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
