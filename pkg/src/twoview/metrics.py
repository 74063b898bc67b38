"""Evaluation: depth error metrics, relative pose angles, trajectory alignment and KITTI VO drift."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Trajectory
from .errors import DegenerateError, InsufficientLengthError
from .geometry import RigidTransform, angle_between, rotation_angle
from .losses import _depth_arrays

SCALINGS = ("none", "median", "gt")
KITTI_BASELINE_M = 0.54
KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
KITTI_STEP = 10
D1_ABS_PX = 3.0
D1_REL = 0.05


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1_all: float
    delta1: float
    delta2: float
    delta3: float
    l1_inv: float
    sc_inv: float
    l1_rel: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PoseErrors:
    rot_deg: float
    tran_deg: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class VoErrors:
    t_err_pct: float
    r_err_deg_per_100m: float
    n_segments: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- depth

def _mean(x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return math.fsum(x) / x.size


def depth_metrics(pred, gt, scaling: str = "none", *, alpha: float | None = None,
                  focal: float | None = None, baseline: float = KITTI_BASELINE_M) -> DepthMetrics:
    """Full depth error battery over jointly valid pixels.

    ``scaling`` is ``none``, ``median`` (multiply the prediction by
    ``median(gt) / median(pred)``) or ``gt`` (multiply by ``alpha``).
    ``d1_all`` needs ``focal`` (pixels); depths are converted to disparities
    ``focal * baseline / d``.  Without ``focal`` it is reported as NaN.
    """
    if scaling not in SCALINGS:
        raise ValueError(f"unknown scaling {scaling!r}; expected one of {SCALINGS}")
    p, g, m = _depth_arrays(pred, gt)
    p, g = p[m], g[m]
    if scaling == "median":
        p = p * (np.median(g) / np.median(p))
    elif scaling == "gt":
        if alpha is None or not alpha > 0:
            raise ValueError("scaling 'gt' needs a positive alpha")
        p = p * alpha

    err = p - g
    ratio = np.maximum(p / g, g / p)
    log_diff = np.log(p) - np.log(g)
    # Variance of the log difference, i.e. sqrt(l_SI / N).
    sc_inv = math.sqrt(max(_mean(log_diff * log_diff) - _mean(log_diff) ** 2, 0.0))
    if focal is not None:
        disp_p = focal * baseline / p
        disp_g = focal * baseline / g
        derr = np.abs(disp_p - disp_g)
        d1 = _mean((derr > D1_ABS_PX) & (derr > D1_REL * disp_g))
    else:
        d1 = math.nan
    abs_rel = _mean(np.abs(err) / g)
    return DepthMetrics(
        abs_rel=abs_rel,
        sq_rel=_mean(err * err / g),
        rmse=math.sqrt(_mean(err * err)),
        rmse_log=math.sqrt(_mean(log_diff * log_diff)),
        d1_all=d1,
        delta1=_mean(ratio < 1.25),
        delta2=_mean(ratio < 1.25 ** 2),
        delta3=_mean(ratio < 1.25 ** 3),
        l1_inv=_mean(np.abs(1.0 / p - 1.0 / g)),
        sc_inv=sc_inv,
        l1_rel=abs_rel,
    )


def average_metrics(items):
    """Unweighted per-field mean of metric records (exactly rounded sums, so order-independent)."""
    items = list(items)
    if not items:
        raise ValueError("nothing to average")
    cls = type(items[0])
    out = {}
    for f in fields(cls):
        vals = [getattr(i, f.name) for i in items]
        if f.type in ("int", int):
            out[f.name] = sum(vals)
        else:
            out[f.name] = math.fsum(vals) / len(vals)
    return cls(**out)


# ---------------------------------------------------------------- relative pose

def pose_errors(pred: RigidTransform, gt: RigidTransform) -> PoseErrors:
    """Geodesic rotation error and translation-direction angle, both in degrees."""
    if np.linalg.norm(pred.translation) == 0 or np.linalg.norm(gt.translation) == 0:
        raise DegenerateError("degenerate: translation direction undefined for zero translation")
    rot = math.degrees(rotation_angle(pred.rotation.T @ gt.rotation))
    tran = math.degrees(angle_between(pred.translation, gt.translation))
    return PoseErrors(rot, tran)


# ---------------------------------------------------------------- trajectories

@dataclass(frozen=True, eq=False)
class Alignment:
    scale: float
    transform: RigidTransform  # gt ~ scale * R @ pred + t
    residual: float            # sum of squared position residuals after alignment
    degenerate: bool = False

    def apply_points(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
        return self.scale * P @ self.transform.rotation.T + self.transform.translation

    def apply(self, traj: Trajectory) -> Trajectory:
        R_a = self.transform.rotation
        poses = tuple(
            RigidTransform(R_a @ p.rotation, self.scale * R_a @ p.translation + self.transform.translation)
            for p in traj.poses
        )
        return Trajectory(poses, traj.indices)


def _positions(x) -> np.ndarray:
    if isinstance(x, Trajectory):
        return x.positions()
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def umeyama_align(pred, gt, *, with_scale: bool = True) -> Alignment:
    """Least-squares similarity taking ``pred`` positions onto ``gt`` positions.

    Accepts Trajectory objects or (N, 3) arrays.  The rotation is always proper
    (the reflection case is corrected through the sign of det(U V^T)).  Nearly
    collinear inputs leave the rotation about the common line undetermined;
    the result is then flagged ``degenerate`` and a warning is issued.
    """
    X = _positions(pred)
    Y = _positions(gt)
    if X.shape != Y.shape:
        raise ValueError(f"trajectory lengths differ: {len(X)} vs {len(Y)}")
    n = len(X)
    if n < 3:
        raise ValueError("alignment needs at least 3 positions")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = np.sum(Xc * Xc) / n
    if var_x <= 0:
        raise DegenerateError("degenerate: all predicted positions coincide")
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    degenerate = bool(D[1] <= 1e-12 * max(D[0], 1e-300))
    if degenerate:
        warnings.warn("trajectory alignment is degenerate (collinear positions); rotation about the line is arbitrary",
                      RuntimeWarning, stacklevel=2)
    res = Y - (s * X @ R.T + t)
    return Alignment(s, RigidTransform(R, t), float(np.sum(res * res)), degenerate)


def _path_distances(P: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(P, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _relative(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``inv(a) @ b`` for 4x4 rigid matrices."""
    out = np.eye(4)
    Ra = a[:3, :3]
    out[:3, :3] = Ra.T @ b[:3, :3]
    out[:3, 3] = Ra.T @ (b[:3, 3] - a[:3, 3])
    return out


def _rot_angle_of(M: np.ndarray) -> float:
    return rotation_angle(M[:3, :3])


def kitti_vo_errors(pred: Trajectory, gt: Trajectory, *, align: bool = True,
                    lengths=KITTI_LENGTHS, step: int = KITTI_STEP) -> VoErrors:
    """Average relative drift over path-length segments (KITTI odometry protocol).

    Segments start every ``step`` frames and end at the first frame whose gt
    path distance exceeds the start by ``length`` metres.  For each, the error
    transform ``inv(pred_rel) @ gt_rel`` gives a translation error and a
    rotation angle, both divided by the length.  ``t_err`` is reported in
    percent and ``r_err`` in degrees per 100 m.  ``pred`` is first aligned to
    ``gt`` by a similarity transform unless ``align`` is False.
    """
    if len(pred.poses) != len(gt.poses):
        raise ValueError(f"trajectory lengths differ: {len(pred.poses)} vs {len(gt.poses)}")
    if len(gt.poses) < 2:
        raise InsufficientLengthError("insufficient length: need at least 2 poses")
    dist = _path_distances(gt.positions())
    if dist[-1] < min(lengths):
        raise InsufficientLengthError(
            f"insufficient length: gt path is {dist[-1]:.3f} m, shortest segment is {min(lengths)} m")
    if align:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pred = umeyama_align(pred, gt).apply(pred)
    P = pred.matrices()
    G = gt.matrices()
    t_errs, r_errs = [], []
    for first in range(0, len(G), step):
        for length in lengths:
            last = int(np.searchsorted(dist, dist[first] + length, side="right"))
            if last >= len(G):
                continue
            err = _relative(_relative(P[first], P[last]), _relative(G[first], G[last]))
            t_errs.append(float(np.linalg.norm(err[:3, 3])) / length)
            r_errs.append(_rot_angle_of(err) / length)
    if not t_errs:
        raise InsufficientLengthError("insufficient length: no complete segment")
    return VoErrors(
        t_err_pct=100.0 * math.fsum(t_errs) / len(t_errs),
        r_err_deg_per_100m=100.0 * math.degrees(math.fsum(r_errs) / len(r_errs)),
        n_segments=len(t_errs),
    )


# ---------------------------------------------------------------- reports

def format_report(title: str, metrics: dict) -> str:
    """Human-readable aligned ``name value`` lines."""
    width = max(len(k) for k in metrics) if metrics else 0
    lines = [title]
    for k, v in metrics.items():
        lines.append(f"  {k.ljust(width)}  {v:.6g}" if isinstance(v, float) else f"  {k.ljust(width)}  {v}")
    return "\n".join(lines) + "\n"
