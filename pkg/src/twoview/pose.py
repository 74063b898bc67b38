"""Robust relative pose from dense correspondences.

Five-point hypotheses inside RANSAC, scored by Sampson distance in squared
pixels.  Hypotheses are evaluated in fixed-order batches (optionally on a
thread pool) and reduced sequentially, so the outcome depends only on the
inputs and the seed, never on the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .data import FlowField, PixelMask
from .errors import DegenerateSampleError, EstimationError
from .fivepoint import five_point
from .flow_io import flow_to_correspondences
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    _sampson,
    decompose_essential,
    essential_from_pose,
    fundamental_from_essential,
    select_by_cheirality,
    skew,
)
from .keypoints import DogParams, detect_keypoint_mask

SAMPLE_SIZE = 5
BATCH_SIZE = 16
LOW_PARALLAX_PX = 0.5
REFIT_ROUNDS = 2
CHEIRALITY_VOTES = 2000  # inliers triangulated to pick among the four decompositions

__all__ = [
    "MASK_STRATEGIES",
    "PoseEstimate",
    "RansacConfig",
    "apply_mask_strategy",
    "estimate_pose_ransac",
    "five_point",
    "select_by_cheirality",
    "strategy_mask",
]


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 1.0  # squared pixels (Sampson)
    confidence: float = 0.999
    max_iterations: int = 1000
    min_iterations: int = 20
    refit_samples: int = 50
    polish: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not self.max_iterations >= self.min_iterations >= 1:
            raise ValueError("need max_iterations >= min_iterations >= 1")
        if self.refit_samples < 0 or self.threads < 1:
            raise ValueError("refit_samples must be >= 0 and threads >= 1")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: RigidTransform  # |t| = 1
    essential: np.ndarray
    inlier_mask: np.ndarray
    iterations_run: int
    mean_inlier_sampson: float
    low_parallax: bool = False

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def required_iterations(inlier_ratio: float, confidence: float, sample_size: int = SAMPLE_SIZE) -> float:
    """Smallest N with ``1 - (1 - w^s)^N >= confidence``."""
    p = inlier_ratio ** sample_size
    if p <= 0:
        return math.inf
    if p >= 1:
        return 1.0
    return math.log(1.0 - confidence) / math.log(1.0 - p)


def _score(F, x1, x2, threshold):
    d = _sampson(x1, x2, F)
    inl = d < threshold
    n = int(inl.sum())
    return n, (float(d[inl].mean()) if n else math.inf), inl


def _truncated_cost(E, x1, x2, K, threshold) -> float:
    """MSAC cost: Sampson error summed over all matches, each capped at the threshold."""
    return float(np.minimum(_sampson(x1, x2, fundamental_from_essential(E, K)), threshold).sum())


def _signed_sampson(x1, x2, F):
    """Square root of the Sampson distance, carrying the sign of the algebraic error."""
    Fx1 = x1 @ F[:, :2].T + F[:, 2]
    Ftx2 = x2 @ F[:2, :] + F[2, :]
    r = np.einsum("ij,ij->i", x2, Fx1[:, :2]) + Fx1[:, 2]
    return r / np.sqrt(Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2)


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    """(3, 2) orthonormal basis of the plane perpendicular to unit vector ``t``."""
    return np.linalg.svd(t[None, :])[2][1:].T


def polish_pose(pose: RigidTransform, x1, x2, K: CameraIntrinsics, threshold: float) -> RigidTransform:
    """Refine (R, t) by robust least squares on Sampson residuals.

    The pose is parameterised as ``R exp([w]x)`` and a unit translation moved in
    its tangent plane, so every iterate is an exact essential matrix.  Residuals
    use a bounded (arctan) loss scaled to ``sqrt(threshold / 2)``, roughly one
    noise standard deviation for the usual threshold choice, so all matches can
    be passed in: gross outliers barely contribute and no inlier band has to be
    fixed around the (biased) starting model.
    """
    R0 = pose.rotation
    t0 = pose.translation / np.linalg.norm(pose.translation)
    T = _tangent_basis(t0)

    def unpack(p):
        t = t0 + T @ p[3:]
        return R0 @ Rotation.from_rotvec(p[:3]).as_matrix(), t / np.linalg.norm(t)

    def residuals(p):
        R, t = unpack(p)
        return _signed_sampson(x1, x2, fundamental_from_essential(skew(t) @ R, K))

    fit = least_squares(residuals, np.zeros(5), loss="arctan", f_scale=math.sqrt(threshold / 2.0), x_scale=1e-2)
    R, t = unpack(fit.x)
    return RigidTransform(R, t)


def _split(n: int, parts: int):
    return [n // parts + (i < n % parts) for i in range(parts)]


def _map(fn, items, pool):
    return [fn(i) for i in items] if pool is None else list(pool.map(fn, items))


def _better(a, b) -> bool:
    """Lexicographic: more inliers, then lower mean error.  Equal keeps the incumbent."""
    if b is None:
        return True
    return a[0] > b[0] or (a[0] == b[0] and a[1] < b[1])


def _hypotheses(sample, n1, n2):
    try:
        return five_point(n1[sample], n2[sample])
    except DegenerateSampleError:
        return []


def _evaluate(sample, n1, n2, x1, x2, K, threshold):
    """Best (count, mean, E, inliers) among the candidates of one minimal sample, or None."""
    best = None
    for E in _hypotheses(sample, n1, n2):
        n, mean, inl = _score(fundamental_from_essential(E, K), x1, x2, threshold)
        if n and _better((n, mean), best and best[:2]):
            best = (n, mean, E, inl)
    return best


def estimate_pose_ransac(x1, x2, K: CameraIntrinsics, config: RansacConfig = RansacConfig()) -> PoseEstimate:
    """Essential matrix by five-point RANSAC, then pose by decomposition and cheirality.

    ``x1`` and ``x2`` are (N, 2) pixel correspondences.  The returned
    translation has unit norm.
    """
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    N = len(x1)
    if N < SAMPLE_SIZE or len(x2) != N:
        raise EstimationError(f"estimation failed: need at least {SAMPLE_SIZE} correspondences, got {N}")
    n1, n2 = K.normalize(x1), K.normalize(x2)
    rng = np.random.default_rng(config.seed)
    thr = config.inlier_threshold

    def run(samples, pool):
        return _map(lambda s: _evaluate(s, n1, n2, x1, x2, K, thr), samples, pool)

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        best = None
        done = 0
        stop_at = config.max_iterations
        while done < stop_at:
            k = min(BATCH_SIZE, config.max_iterations - done)
            samples = [rng.choice(N, SAMPLE_SIZE, replace=False) for _ in range(k)]
            for res in run(samples, pool):
                done += 1
                if res is not None and _better(res[:2], best and best[:2]):
                    best = res
                    need = required_iterations(best[0] / N, config.confidence)
                    stop_at = int(min(config.max_iterations, max(config.min_iterations, math.ceil(need))))
                if done >= stop_at:
                    break
        if best is None or best[0] < SAMPLE_SIZE:
            raise EstimationError("estimation failed: degenerate input, no model with at least five inliers")

        # Refit with minimal solves only, so E stays an essential matrix.  Candidates
        # are ranked by the truncated Sampson cost over all matches, which tracks
        # accuracy far better than the inlier count; the consensus set is refreshed
        # once halfway through.
        E = best[2]
        cost = _truncated_cost(E, x1, x2, K, thr)
        for chunk in _split(config.refit_samples, REFIT_ROUNDS):
            consensus = np.flatnonzero(_sampson(x1, x2, fundamental_from_essential(E, K)) < thr)
            if consensus.size < SAMPLE_SIZE:
                break
            samples = [rng.choice(consensus, SAMPLE_SIZE, replace=False) for _ in range(chunk)]
            for cands in _map(lambda s: _hypotheses(s, n1, n2), samples, pool):
                for cand in cands:
                    c = _truncated_cost(cand, x1, x2, K, thr)
                    if c < cost:
                        E, cost = cand, c
        count, mean, inliers = _score(fundamental_from_essential(E, K), x1, x2, thr)
        if count < SAMPLE_SIZE:
            raise EstimationError("estimation failed: refit left fewer than five inliers")
    finally:
        if pool is not None:
            pool.shutdown()

    voters = np.flatnonzero(inliers)
    voters = voters[:: max(1, voters.size // CHEIRALITY_VOTES)]
    pose = select_by_cheirality(decompose_essential(E), x1[voters], x2[voters], K)
    if config.polish:
        # Kept only if the capped cost over all matches improves.
        refined = polish_pose(pose, x1, x2, K, thr)
        E_ref = essential_from_pose(refined)
        E_ref /= np.linalg.norm(E_ref)
        if _truncated_cost(E_ref, x1, x2, K, thr) < cost:
            pose, E = refined, E_ref
            count, mean, inliers = _score(fundamental_from_essential(E, K), x1, x2, thr)
    t = pose.translation / np.linalg.norm(pose.translation)
    parallax = float(np.median(np.linalg.norm(x2[inliers] - x1[inliers], axis=1)))
    return PoseEstimate(
        pose=RigidTransform(pose.rotation, t),
        essential=E,
        inlier_mask=inliers,
        iterations_run=done,
        mean_inlier_sampson=mean,
        low_parallax=parallax < LOW_PARALLAX_PX,
    )


# ---------------------------------------------------------------- masking

MASK_STRATEGIES = ("all", "grid", "keypoints", "weights")
_ALIASES = {"keypoint_locations": "keypoints", "weight_threshold": "weights"}


def strategy_mask(shape, strategy: str, aux=None, *, stride: int = 2, tau: float = 0.5,
                  dog: DogParams = DogParams()) -> PixelMask:
    """Pixel selection for one masking strategy.

    ``aux`` is the view-1 grayscale image for ``keypoints`` and an external
    weight map for ``weights`` (pixels with weight >= ``tau`` are kept).
    """
    strategy = _ALIASES.get(strategy, strategy)
    h, w = shape
    if strategy == "all":
        return PixelMask(np.ones((h, w), dtype=bool))
    if strategy == "grid":
        if stride < 1:
            raise ValueError("grid stride must be >= 1")
        m = np.zeros((h, w), dtype=bool)
        m[::stride, ::stride] = True
        return PixelMask(m)
    if strategy in ("keypoints", "weights"):
        if aux is None:
            need = "an image" if strategy == "keypoints" else "a weight map"
            raise ValueError(f"mask strategy {strategy!r} needs {need}")
        aux = np.asarray(aux)
        if aux.shape != (h, w):
            raise ValueError(f"auxiliary raster shape {aux.shape} does not match flow shape {(h, w)}")
        if strategy == "keypoints":
            return detect_keypoint_mask(aux, dog)
        return PixelMask(np.asarray(aux, dtype=np.float64) >= tau)
    raise ValueError(f"unknown mask strategy {strategy!r}; expected one of {MASK_STRATEGIES}")


def apply_mask_strategy(flow: FlowField, strategy: str, aux=None, **params):
    """Correspondences ``(x1, x2)`` surviving the chosen masking strategy."""
    return flow_to_correspondences(flow, strategy_mask(flow.shape, strategy, aux, **params))
