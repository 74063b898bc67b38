"""Scale-invariant plane-sweep depth.

Depth hypotheses are uniform in inverse depth, ``d_l = L * d_min / l``.  Each
pixel of view 1 is tested against the ``L`` points its ray would project to in
view 2 at those depths.  Because the translation is normalised to unit length
before sweeping, the candidate set (and everything computed from it) does not
depend on the unknown metric scale of the scene; recovered depths are in units
of the baseline and are brought back to metric units with ``reconcile_scale``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import DepthMap, _frozen
from .errors import DegenerateError
from .geometry import ZERO_TRANSLATION_TOL, CameraIntrinsics, RigidTransform, pixel_grid
from .sampling import bilinear

COST_FUNCTIONS = ("sad", "zncc")
DEFAULT_PATCH = {"sad": 5, "zncc": 7}
MODES = ("hard", "soft")
SOFT_TAU = 0.3
CONFIDENCE_EPS = 1e-12


@dataclass(frozen=True)
class HypothesisSchedule:
    L: int = 64
    d_min: float = 1.0

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 2:
            raise ValueError("hypothesis count L must be an integer >= 2")
        if not (self.d_min > 0 and math.isfinite(self.d_min)):
            raise ValueError("d_min must be positive and finite")

    @property
    def inverse_depths(self) -> np.ndarray:
        """``1 / d_l = l / (L * d_min)`` for l = 1..L (increasing)."""
        return np.arange(1, self.L + 1) / (self.L * self.d_min)

    @property
    def depths(self) -> np.ndarray:
        """``d_l = L * d_min / l`` for l = 1..L (farthest first)."""
        return (self.L * self.d_min) / np.arange(1, self.L + 1)

    @property
    def d_max(self) -> float:
        return self.L * self.d_min

    def quantization_bound(self, depth) -> float:
        """Worst relative depth error of the nearest hypothesis: ``max d / (L * d_min)``."""
        return float(np.max(depth)) / (self.L * self.d_min)


def normalize_translation(pose: RigidTransform):
    """``(R, t / |t|)`` and the removed scale ``alpha = |t|``."""
    alpha = float(np.linalg.norm(pose.translation))
    if not alpha > ZERO_TRANSLATION_TOL:
        raise DegenerateError("degenerate: zero translation cannot be normalised")
    return pose.with_translation(pose.translation / alpha), alpha


def _homography_parts(K: CameraIntrinsics, pose: RigidTransform):
    """``A = K R K^-1`` and ``b = K t`` so that ``x'_l ~ A x + b / d_l``."""
    return K.K @ pose.rotation @ K.K_inv, K.K @ pose.translation


def _project(xh: np.ndarray, A, b, inv_depth: float):
    p = xh @ A.T + inv_depth * b
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = p[..., :2] / z[..., None]
    return xy, z > 0


def warp_candidates(x, K: CameraIntrinsics, pose: RigidTransform, schedule: HypothesisSchedule):
    """View-2 candidates ``x'_l ~ K [R | t] [(K^-1 x) d_l; 1]`` for each hypothesis.

    ``x`` is (2,) or (N, 2).  Returns ``(candidates, valid)`` of shapes
    (L, N, 2) and (L, N); ``valid`` is False where the point would lie behind
    camera 2.  The pose is used as given, so callers wanting scale-invariant
    candidates pass a normalised translation.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    xh = np.column_stack([x, np.ones(len(x))])
    A, b = _homography_parts(K, pose)
    out = np.empty((schedule.L, len(x), 2))
    valid = np.empty((schedule.L, len(x)), dtype=bool)
    for i, inv_d in enumerate(schedule.inverse_depths):
        out[i], valid[i] = _project(xh, A, b, inv_d)
    return out, valid


@dataclass(frozen=True, eq=False)
class CostVolume:
    cost: np.ndarray   # (L, H, W), lower is better
    valid: np.ndarray  # (L, H, W)
    schedule: HypothesisSchedule
    cost_fn: str = "sad"

    def __post_init__(self):
        if self.cost.shape != self.valid.shape or self.cost.shape[0] != self.schedule.L:
            raise ValueError("cost volume shape does not match its schedule")
        object.__setattr__(self, "cost", _frozen(self.cost, np.float64))
        object.__setattr__(self, "valid", _frozen(self.valid, bool))

    @property
    def L(self) -> int:
        return self.cost.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cost.shape[1:]


def _box_mean(a: np.ndarray, size: int) -> np.ndarray:
    """Mean over a ``size x size`` window; samples beyond the border count as zero."""
    return ndimage.uniform_filter(a, size=size, mode="constant", cval=0.0)


def _slice_cost(img1, img2, valid2, xh, A, b, inv_d, cost_fn, patch, ref):
    xy, front = _project(xh, A, b, inv_d)
    warped, inside = bilinear(img2, xy[..., 0], xy[..., 1])
    inside &= front
    if valid2 is not None:
        support, _ = bilinear(valid2, xy[..., 0], xy[..., 1])
        inside &= support > 1.0 - 1e-9  # all four neighbours usable
    wgt = inside.astype(np.float64)
    frac = _box_mean(wgt, patch)  # fraction of the patch sampled inside both images
    valid = front & (frac > 0.5)
    with np.errstate(divide="ignore", invalid="ignore"):
        if cost_fn == "sad":
            cost = _box_mean(wgt * np.abs(img1 - warped), patch) / frac
        else:
            m1 = _box_mean(wgt * img1, patch) / frac
            m2 = _box_mean(wgt * warped, patch) / frac
            var1 = _box_mean(wgt * img1 * img1, patch) / frac - m1 * m1
            var2 = _box_mean(wgt * warped * warped, patch) / frac - m2 * m2
            cov = _box_mean(wgt * img1 * warped, patch) / frac - m1 * m2
            den = np.sqrt(np.maximum(var1, 0.0) * np.maximum(var2, 0.0))
            # Flat patches carry no correlation information: cost 1 (uncorrelated).
            ncc = np.where(den > ref, cov / np.where(den > ref, den, 1.0), 0.0)
            cost = 1.0 - np.clip(ncc, -1.0, 1.0)
    cost = np.where(valid, np.maximum(cost, 0.0), np.inf)
    return cost, valid


def build_cost_volume(img1, img2, K: CameraIntrinsics, pose: RigidTransform, schedule: HypothesisSchedule,
                      cost_fn: str = "sad", *, patch: int | None = None, valid2=None,
                      threads: int = 1) -> CostVolume:
    """Photometric cost of every (pixel, hypothesis) pair.

    ``cost_fn`` is ``"sad"`` (mean absolute difference, 5x5 by default) or
    ``"zncc"`` (one minus zero-mean normalised cross-correlation, 7x7).  View 2
    is sampled bilinearly along the plane-induced warp; cells whose patch has
    half or more of its samples outside either image, or whose centre lies
    behind camera 2, are invalid (cost ``inf``).  ``valid2`` optionally marks
    usable view-2 pixels; samples touching unusable ones count as outside.  Slices are independent, so
    the result does not depend on ``threads``.
    """
    img1 = np.asarray(img1, dtype=np.float64)
    img2 = np.asarray(img2, dtype=np.float64)
    if img1.ndim != 2 or img1.shape != img2.shape:
        raise ValueError(f"images must be 2-D and equal in size, got {img1.shape} and {img2.shape}")
    if cost_fn not in COST_FUNCTIONS:
        raise ValueError(f"unknown cost function {cost_fn!r}; expected one of {COST_FUNCTIONS}")
    if valid2 is not None:
        valid2 = np.asarray(valid2, dtype=np.float64)
        if valid2.shape != img2.shape:
            raise ValueError("valid2 must match the image size")
    patch = DEFAULT_PATCH[cost_fn] if patch is None else int(patch)
    if patch < 1 or patch % 2 == 0:
        raise ValueError("patch size must be a positive odd integer")
    h, w = img1.shape
    xh = np.concatenate([pixel_grid(h, w), np.ones((h, w, 1))], axis=-1)
    A, b = _homography_parts(K, pose)
    ref = 1e-6 * max(float(np.var(img1)), 1e-12)

    def one(inv_d):
        return _slice_cost(img1, img2, valid2, xh, A, b, inv_d, cost_fn, patch, ref)

    inv = schedule.inverse_depths
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            slices = list(pool.map(one, inv))
    else:
        slices = [one(v) for v in inv]
    cost = np.stack([c for c, _ in slices])
    valid = np.stack([v for _, v in slices])
    return CostVolume(cost, valid, schedule, cost_fn)


@dataclass(frozen=True, eq=False)
class SweepResult:
    depth: DepthMap
    confidence: np.ndarray  # (H, W) in [0, 1]
    mode: str = "hard"

    def __post_init__(self):
        object.__setattr__(self, "confidence", _frozen(self.confidence, np.float64))


def _valley(cost: np.ndarray) -> np.ndarray:
    """(L, H, W) mask of the cost valley around the best hypothesis.

    The valley is the longest run of hypotheses containing the argmin along
    which the cost never decreases when moving away from the argmin.  Invalid
    cells (``inf``) end the run only once the cost starts falling again.
    """
    L = cost.shape[0]
    best = np.argmin(cost, axis=0)
    with np.errstate(invalid="ignore"):
        step = np.diff(cost, axis=0)  # step[i] = c[i+1] - c[i]
    step = np.nan_to_num(step, nan=0.0, posinf=np.inf, neginf=-np.inf)
    idx = np.arange(L - 1)[:, None, None]
    left_break = np.where((idx < best) & (step > 0), idx, -1).max(axis=0)
    right_break = np.where((idx >= best) & (step < 0), idx, L - 1).min(axis=0)
    lvl = np.arange(L)[:, None, None]
    return (lvl > left_break) & (lvl <= right_break)


def _cost_slope(cost, valid):
    """Mean absolute change of cost between adjacent valid hypotheses (per pixel)."""
    both = valid[1:] & valid[:-1]
    with np.errstate(invalid="ignore"):
        step = np.where(both, np.abs(np.diff(np.where(valid, cost, 0.0), axis=0)), 0.0)
    n = both.sum(axis=0)
    return np.where(n > 0, step.sum(axis=0) / np.maximum(n, 1), 0.0)


def _softmin_weights(cost, valid, tau):
    """Softmin over the valley of the best hypothesis.

    Costs are standardised per pixel as ``(c - min) / s`` with ``s`` the mean
    cost change per hypothesis step, so ``tau`` is measured in steps of a
    typical slope and does not depend on the units of the cost function.
    Distant secondary minima from repetitive texture lie outside the valley
    and cannot pull the expectation away.
    """
    c = np.where(valid, cost, np.inf)
    lo = np.min(c, axis=0)
    s = _cost_slope(cost, valid)
    with np.errstate(invalid="ignore"):
        z = (c - lo) / np.where(s > 0, s, 1.0)
    z = np.where(valid & _valley(c), z, np.inf)
    wts = np.exp(-z / tau)
    return wts / np.maximum(wts.sum(axis=0), np.finfo(float).tiny)


def extract_depth(volume: CostVolume, mode: str = "hard", *, tau: float = SOFT_TAU) -> SweepResult:
    """Depth from a cost volume by winner-take-all or soft-argmin in inverse depth.

    Confidence is the relative margin ``(c2 - c1) / (c2 + eps)`` between the two
    best costs in hard mode and ``1 - H / log n`` in soft mode, where ``H`` is
    the entropy of the softmin weights and ``n`` the number of valid
    hypotheses at the pixel.  A pixel with a single valid hypothesis has
    nothing to compare against and gets confidence 0.  Pixels without any
    valid hypothesis are invalid with confidence 0.
    """
    if mode not in MODES:
        raise ValueError(f"unknown extraction mode {mode!r}; expected one of {MODES}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    sched = volume.schedule
    valid = volume.valid
    cost = np.where(valid, volume.cost, np.inf)
    any_valid = valid.any(axis=0)
    inv = sched.inverse_depths

    if mode == "hard":
        order = np.argsort(cost, axis=0, kind="stable")
        best = np.take_along_axis(cost, order[:1], axis=0)[0]
        second = np.take_along_axis(cost, order[1:2], axis=0)[0]
        inv_d = inv[order[0]]
        with np.errstate(invalid="ignore"):
            conf = (second - best) / (second + CONFIDENCE_EPS)
        conf = np.where(np.isfinite(second), conf, 0.0)
    else:
        wts = _softmin_weights(cost, valid, tau)
        inv_d = np.einsum("l,lhw->hw", inv, wts)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.sum(np.where(wts > 0, wts * np.log(wts), 0.0), axis=0)
        n_valid = valid.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            conf = np.where(n_valid > 1, 1.0 - ent / np.log(np.maximum(n_valid, 2)), 0.0)
        inv_d = np.clip(inv_d, inv[0], inv[-1])

    depth = np.where(any_valid, 1.0 / inv_d, 0.0)
    depth = np.where(any_valid, np.clip(depth, sched.d_min, sched.d_max), 0.0)
    conf = np.where(any_valid, np.clip(conf, 0.0, 1.0), 0.0)
    return SweepResult(DepthMap(depth, any_valid), conf, mode)


def reconcile_scale(pred: DepthMap, alpha_gt: float) -> DepthMap:
    """Bring an up-to-scale depth map to metric units: ``d = alpha_gt * d_hat``."""
    if not alpha_gt > 0:
        raise ValueError("alpha_gt must be positive")
    return pred.scaled(alpha_gt)


def sweep_depth(img1, img2, K: CameraIntrinsics, pose: RigidTransform, schedule: HypothesisSchedule = HypothesisSchedule(),
                *, cost_fn: str = "sad", mode: str = "hard", tau: float = SOFT_TAU, patch: int | None = None,
                valid2=None, threads: int = 1):
    """Normalise the translation, sweep, and extract depth.

    Returns ``(result, alpha)`` where ``alpha = |t|`` of the supplied pose; the
    depth is in units of the baseline.
    """
    unit, alpha = normalize_translation(pose)
    volume = build_cost_volume(img1, img2, K, unit, schedule, cost_fn, patch=patch, valid2=valid2, threads=threads)
    return extract_depth(volume, mode, tau=tau), alpha
