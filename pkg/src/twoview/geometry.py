"""Calibrated two-view geometry.

Conventions: camera 1 is ``K [I | 0]``, camera 2 is ``K [R | t]`` so a point
``X`` in the first camera frame maps to ``R @ X + t`` in the second.  The
essential matrix is ``E = [t]x R`` and every correspondence satisfies
``x2^T K^-T E K^-1 x1 = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheiralityError, DegenerateError, NoParallaxError

# Library tolerances; every function taking one also accepts an override.
ORTHONORMAL_TOL = 1e-6
PROJECT_ROTATION_ABOVE = 1e-12
ZERO_TRANSLATION_TOL = 1e-12
RANK2_TOL = 1e-8
PARALLAX_TOL_RAD = 1e-8

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=np.float64)
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2])

    def normalize(self, pts) -> np.ndarray:
        """Pixel points (N, 2) to normalized image-plane points (N, 2)."""
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([(pts[..., 0] - self.cx) / self.fx, (pts[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([pts[..., 0] * self.fx + self.cx, pts[..., 1] * self.fy + self.cy], axis=-1)

    def project(self, X) -> np.ndarray:
        """Project camera-frame points (N, 3) to pixels (N, 2)."""
        X = np.asarray(X, dtype=np.float64)
        return self.denormalize(X[..., :2] / X[..., 2:3])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation.  Near-orthonormal input is snapped onto SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        drift = np.abs(R.T @ R - np.eye(3)).max()
        if drift > ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {drift:.3g})")
        if np.linalg.det(R) <= 0:
            raise ValueError("rotation must have determinant +1")
        if drift > PROJECT_ROTATION_ABOVE:
            R = nearest_rotation(R)
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self * other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def with_translation(self, t) -> "RigidTransform":
        return RigidTransform(self.rotation, t)

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.translation))


def nearest_rotation(M) -> np.ndarray:
    """Closest proper rotation in Frobenius norm (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; ``angle`` in radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    A = skew(a)
    return np.eye(3) + np.sin(angle) * A + (1.0 - np.cos(angle)) * (A @ A)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians (stable near 0 and pi)."""
    R = np.asarray(R, dtype=np.float64)
    cos = (np.trace(R) - 1.0) / 2.0
    sin = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(sin, cos))


def angle_between(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def essential_from_pose(pose: RigidTransform, *, zero_tol: float = ZERO_TRANSLATION_TOL) -> np.ndarray:
    if pose.baseline <= zero_tol:
        raise DegenerateError("degenerate: no epipolar geometry (zero translation)")
    return skew(pose.translation) @ pose.rotation


def fundamental_from_essential(E, K: CameraIntrinsics) -> np.ndarray:
    Ki = K.K_inv
    return Ki.T @ np.asarray(E, dtype=np.float64) @ Ki


def decompose_essential(E, *, rank_tol: float = RANK2_TOL) -> list[RigidTransform]:
    """Four (R, t) candidates in canonical order (R1,+t), (R1,-t), (R2,+t), (R2,-t), with |t| = 1."""
    E = np.asarray(E, dtype=np.float64)
    U, s, Vt = np.linalg.svd(E)
    if s[0] <= 0 or s[1] / s[0] < rank_tol:
        raise DegenerateError("degenerate essential matrix (rank < 2)")
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [RigidTransform(R1, t), RigidTransform(R1, -t), RigidTransform(R2, t), RigidTransform(R2, -t)]


@dataclass(frozen=True, eq=False)
class Triangulation:
    points: np.ndarray  # (N, 3) in camera-1 frame
    depth1: np.ndarray
    depth2: np.ndarray

    @property
    def in_front(self) -> np.ndarray:
        """Cheirality flag per point: positive depth in both views."""
        return (self.depth1 > 0) & (self.depth2 > 0)


def _triangulate_normalized(n1, n2, R, t):
    """Homogeneous DLT on normalized coordinates; returns (N, 4) homogeneous points."""
    n = n1.shape[0]
    P2 = np.hstack([R, t[:, None]])
    A = np.empty((n, 4, 4))
    A[:, 0] = np.array([-1.0, 0.0, 0.0, 0.0]) + n1[:, 0:1] * np.array([0.0, 0.0, 1.0, 0.0])
    A[:, 1] = np.array([0.0, -1.0, 0.0, 0.0]) + n1[:, 1:2] * np.array([0.0, 0.0, 1.0, 0.0])
    A[:, 2] = n2[:, 0:1] * P2[2] - P2[0]
    A[:, 3] = n2[:, 1:2] * P2[2] - P2[1]
    # Row scaling does not move the solution but evens out conditioning.
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    return Vt[:, -1, :]


def _ray_angles(n1, n2, R):
    r1 = np.column_stack([n1, np.ones(len(n1))])
    r2 = np.column_stack([n2, np.ones(len(n2))]) @ R  # R^T applied to each row
    cross = np.linalg.norm(np.cross(r1, r2), axis=1)
    return np.arctan2(cross, np.einsum("ij,ij->i", r1, r2))


def triangulate(x1, x2, K: CameraIntrinsics, pose: RigidTransform, *, parallax_tol: float = PARALLAX_TOL_RAD) -> Triangulation:
    """Linear (DLT) triangulation of pixel correspondences.

    Accepts single points (2,) or batches (N, 2).  Points behind either camera
    are returned with a non-positive depth rather than raising, since pose
    disambiguation relies on that sign.  Raises NoParallaxError when any pair
    of rays is parallel within ``parallax_tol`` radians.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    n1, n2 = K.normalize(x1), K.normalize(x2)
    R, t = pose.rotation, pose.translation
    if pose.baseline <= ZERO_TRANSLATION_TOL or np.any(_ray_angles(n1, n2, R) < parallax_tol):
        raise NoParallaxError("no parallax: viewing rays are parallel")
    Xh = _triangulate_normalized(n1, n2, R, t)
    if np.any(np.abs(Xh[:, 3]) < 1e-15 * np.abs(Xh[:, :3]).max(axis=1)):
        raise NoParallaxError("no parallax: point at infinity")
    X = Xh[:, :3] / Xh[:, 3:4]
    return Triangulation(X, X[:, 2], (X @ R.T + t)[:, 2])


def cheirality_counts(candidates, n1, n2) -> np.ndarray:
    """Number of normalized correspondences in front of both cameras, per candidate pose."""
    counts = []
    for cand in candidates:
        R, t = cand.rotation, cand.translation
        Xh = _triangulate_normalized(n1, n2, R, t)
        # Sign-robust depth test on homogeneous coordinates.
        w = Xh[:, 3]
        d1 = Xh[:, 2] * w
        d2 = (Xh[:, :3] @ R[2] + t[2] * w) * w
        counts.append(int(np.count_nonzero((d1 > 0) & (d2 > 0))))
    return np.array(counts)


def select_by_cheirality(candidates, x1, x2, K: CameraIntrinsics) -> RigidTransform:
    """Pick the candidate with the most points in front of both cameras; first wins ties."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    if x1.shape[0] == 0:
        raise ValueError("at least one correspondence is required")
    counts = cheirality_counts(candidates, K.normalize(x1), K.normalize(x2))
    best = int(np.argmax(counts))
    if counts[best] == 0:
        raise CheiralityError("cheirality failed: no candidate places points in front of both cameras")
    return candidates[best]


def epipolar_residuals(x1, x2, E, K: CameraIntrinsics) -> np.ndarray:
    """Algebraic residual ``x2^T F x1`` in pixel coordinates."""
    F = fundamental_from_essential(E, K)
    h1 = np.column_stack([np.atleast_2d(x1), np.ones(len(np.atleast_2d(x1)))])
    h2 = np.column_stack([np.atleast_2d(x2), np.ones(len(np.atleast_2d(x2)))])
    return np.einsum("ij,jk,ik->i", h2, F, h1)


def sampson_distance(x1, x2, E, K: CameraIntrinsics) -> np.ndarray:
    """First-order geometric error of correspondences w.r.t. E, in squared pixels.

    Invariant to the scale of E.  A vanishing gradient (both epipolar lines
    degenerate) yields ``inf``.
    """
    F = fundamental_from_essential(E, K)
    return _sampson(np.atleast_2d(x1), np.atleast_2d(x2), F)


def _sampson(x1, x2, F):
    # Affine forms of F x1 and F^T x2, avoiding homogeneous copies of the points.
    Fx1 = x1 @ F[:, :2].T + F[:, 2]
    Ftx2 = x2 @ F[:2, :] + F[2, :]
    r = np.einsum("ij,ij->i", x2, Fx1[:, :2]) + Fx1[:, 2]
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, r * r / np.where(den > 0, den, 1.0), np.inf)
    return out


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of pixel coordinates ``(x, y)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def rigid_flow(depth, pose: RigidTransform, K: CameraIntrinsics):
    """Flow induced by camera motion over a static scene with known view-1 depth.

    Pixels whose depth is invalid or whose reprojection lands behind camera 2
    are invalid.  Out-of-frame targets are kept.
    """
    from .data import FlowField

    H, W = depth.shape
    grid = pixel_grid(H, W)
    d = np.where(depth.valid, depth.depth, 1.0)
    X = np.concatenate([K.normalize(grid), np.ones((H, W, 1))], axis=-1) * d[..., None]
    X2 = X @ pose.rotation.T + pose.translation
    z = X2[..., 2]
    valid = depth.valid & (z > 0)
    zs = np.where(valid, z, 1.0)
    target = np.stack([K.fx * X2[..., 0] / zs + K.cx, K.fy * X2[..., 1] / zs + K.cy], axis=-1)
    uv = np.where(valid[..., None], target - grid, 0.0)
    return FlowField(uv, valid)
