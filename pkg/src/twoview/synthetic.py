"""Ground-truth two-view scenes with exact flow, depth and pose.

Used as the reference oracle throughout the test-suite and by ``twoview synth``.
Three scene kinds are supported:

* ``point_cloud``: ``n_points`` distinct view-1 pixels with random depths.
  Flow and depth are sparse (valid only at those pixels).
* ``textured_plane``: a fronto-parallel plane at ``plane_depth`` carrying a
  procedural value-noise texture.
* ``two_planes``: two fronto-parallel half-planes at ``plane_depths``, split at
  column ``split * width`` of view 1.  Produces occlusions in view 2.

Observed flow is the exact rigid flow with Gaussian endpoint noise on inliers
and a controlled fraction of outliers (uniform in-frame targets, targets
restricted to textureless pixels, or a coherently moving block).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .data import DepthMap, FlowField, PixelMask
from .errors import DegenerateError
from .geometry import CameraIntrinsics, RigidTransform, pixel_grid, rigid_flow, rotation_about
from .sampling import bilinear

KINDS = ("point_cloud", "textured_plane", "two_planes")
OUTLIER_MODES = ("uniform", "flat", "flat_static", "dynamic")

# (cell size in px, amplitude) per value-noise octave
_TEXTURE_OCTAVES = ((24.0, 0.45), (12.0, 0.3), (6.0, 0.2), (3.0, 0.1))
_FLAT_BLOCK = 32.0


def default_intrinsics(width: int = 320, height: int = 240) -> CameraIntrinsics:
    f = 0.9 * width
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def random_pose(rng: np.random.Generator, *, max_angle_deg: float = 10.0, baseline: float = 1.0,
                forward_bias: float = 0.0) -> RigidTransform:
    """Random small rotation and a translation of length ``baseline``.

    ``forward_bias`` in [0, 1] tilts the translation towards the optical axis
    (0 = isotropic direction).
    """
    axis = rng.normal(size=3)
    R = rotation_about(axis, np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg)))
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    if forward_bias:
        t = (1.0 - forward_bias) * t + forward_bias * np.array([0.0, 0.0, np.sign(t[2]) or 1.0])
        t /= np.linalg.norm(t)
    return RigidTransform(R, baseline * t)


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "textured_plane"
    image_size: tuple[int, int] = (320, 240)  # (width, height)
    intrinsics: CameraIntrinsics | None = None
    pose: RigidTransform = field(default_factory=lambda: RigidTransform(np.eye(3), [0.5, 0.0, 0.0]))
    depth_range: tuple[float, float] = (2.0, 10.0)
    n_points: int = 500
    plane_depth: float = 5.0
    plane_depths: tuple[float, float] = (3.0, 6.0)
    split: float = 0.5
    texture_seed: int = 0
    flat_fraction: float = 0.0
    noise_px: float = 0.0
    outlier_ratio: float = 0.0
    outlier_mode: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {KINDS}")
        if self.outlier_mode not in OUTLIER_MODES:
            raise ValueError(f"unknown outlier mode {self.outlier_mode!r}")
        near, far = self.depth_range
        if not (near > 0 and far > near):
            raise ValueError("depth_range must satisfy 0 < near < far")
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise ValueError("outlier_ratio must lie in [0, 1)")
        if self.noise_px < 0:
            raise ValueError("noise_px must be non-negative")
        if not 0.0 <= self.flat_fraction < 1.0:
            raise ValueError("flat_fraction must lie in [0, 1)")
        w, h = self.image_size
        if w < 2 or h < 2:
            raise ValueError("image_size too small")
        if self.kind == "point_cloud" and not 1 <= self.n_points <= w * h:
            raise ValueError("n_points must be between 1 and the pixel count")
        if self.kind == "textured_plane" and self.plane_depth <= 0:
            raise ValueError("plane_depth must be positive")
        if self.kind == "two_planes" and min(self.plane_depths) <= 0:
            raise ValueError("plane depths must be positive")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")

    @property
    def camera(self) -> CameraIntrinsics:
        return self.intrinsics or default_intrinsics(*self.image_size)

    def scaled(self, alpha: float) -> "SceneSpec":
        """Same scene with every length multiplied by ``alpha``."""
        p = self.pose
        return replace(
            self,
            pose=RigidTransform(p.rotation, p.translation * alpha),
            depth_range=(self.depth_range[0] * alpha, self.depth_range[1] * alpha),
            plane_depth=self.plane_depth * alpha,
            plane_depths=(self.plane_depths[0] * alpha, self.plane_depths[1] * alpha),
        )


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    spec: SceneSpec
    gt_depth: DepthMap
    gt_flow: FlowField
    flow: FlowField  # observed: noise + outliers
    outlier_mask: np.ndarray  # (H, W) bool
    image1: np.ndarray | None = None
    image2: np.ndarray | None = None
    image2_valid: np.ndarray | None = None
    flat_mask: np.ndarray | None = None
    occluded: np.ndarray | None = None  # view-1 pixels hidden in view 2

    @property
    def gt_pose(self) -> RigidTransform:
        return self.spec.pose

    @property
    def alpha_gt(self) -> float:
        return self.spec.pose.baseline

    @property
    def K(self) -> CameraIntrinsics:
        return self.spec.camera

    @property
    def n_outliers(self) -> int:
        return int(self.outlier_mask.sum())

    @property
    def covisible(self) -> np.ndarray:
        """View-1 pixels whose surface point is seen, unoccluded, inside view 2."""
        h, w = self.gt_flow.shape
        target = pixel_grid(h, w) + self.gt_flow.uv
        inside = ((target[..., 0] >= 0) & (target[..., 0] <= w - 1)
                  & (target[..., 1] >= 0) & (target[..., 1] <= h - 1))
        hidden = self.occluded if self.occluded is not None else False
        return self.gt_flow.valid & inside & ~hidden

    def correspondences(self, mask: np.ndarray | None = None):
        from .flow_io import flow_to_correspondences

        return flow_to_correspondences(self.flow, PixelMask(mask) if mask is not None else None)


# ---------------------------------------------------------------- planes & rays

def _planes(spec: SceneSpec):
    """List of (depth, x_min, x_max) half-planes in camera-1 coordinates."""
    K = spec.camera
    if spec.kind == "textured_plane":
        return [(spec.plane_depth, -np.inf, np.inf)]
    b = spec.split * spec.image_size[0] - 0.5
    da, db = spec.plane_depths
    return [(da, -np.inf, (b - K.cx) * da / K.fx), (db, (b - K.cx) * db / K.fx, np.inf)]


def _cast(origin, dirs, planes):
    """Nearest hit of rays ``origin + s*dirs`` (s > 0) with the half-planes.

    Returns the ray parameter (inf for no hit) and the plane index (-1).
    """
    best = np.full(dirs.shape[:-1], np.inf)
    which = np.full(dirs.shape[:-1], -1)
    dz = dirs[..., 2]
    for i, (D, xmin, xmax) in enumerate(planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (D - origin[2]) / dz
        X = origin[0] + s * dirs[..., 0]
        hit = (s > 0) & np.isfinite(s) & (X >= xmin) & (X < xmax)
        closer = hit & (s < best)
        best = np.where(closer, s, best)
        which = np.where(closer, i, which)
    return best, which


def _view1_depth(spec: SceneSpec) -> np.ndarray:
    w, h = spec.image_size
    if spec.kind == "textured_plane":
        return np.full((h, w), float(spec.plane_depth))
    b = spec.split * w - 0.5
    cols = np.arange(w, dtype=np.float64)
    row = np.where(cols < b, spec.plane_depths[0], spec.plane_depths[1])
    return np.broadcast_to(row, (h, w)).astype(np.float64)


# ---------------------------------------------------------------- texture

def _hash01(i, j, seed: int, salt: int) -> np.ndarray:
    """Stateless uniform [0, 1) values for integer lattice nodes (splitmix64 finaliser)."""
    with np.errstate(over="ignore"):
        z = (np.asarray(i, dtype=np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             ^ np.asarray(j, dtype=np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ np.uint64((seed * 1000003 + salt) & 0xFFFFFFFFFFFFFFFF))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(2 ** 53)


def _value_noise(u, v, seed: int):
    total = np.zeros_like(u)
    for octave, (cell, amp) in enumerate(_TEXTURE_OCTAVES):
        i0 = int(np.floor(v.min() / cell)) - 3
        j0 = int(np.floor(u.min() / cell)) - 3
        nv = int(np.ceil(v.max() / cell)) - i0 + 4
        nu = int(np.ceil(u.max() / cell)) - j0 + 4
        ii, jj = np.mgrid[i0:i0 + nv, j0:j0 + nu]
        lattice = 2.0 * _hash01(ii, jj, seed, octave) - 1.0
        total += amp * ndimage.map_coordinates(lattice, [v / cell - i0, u / cell - j0], order=3, mode="nearest")
    return np.clip(0.5 + 0.5 * total, 0.0, 1.0)


def _flat_blocks(u, v, seed: int, fraction: float):
    if fraction <= 0:
        return np.zeros(u.shape, dtype=bool)
    return _hash01(np.floor(v / _FLAT_BLOCK), np.floor(u / _FLAT_BLOCK), seed, 97) < fraction


def _texture_coords(spec: SceneSpec, X, plane_index):
    """Map camera-1 points on plane ``plane_index`` to texture coordinates in ~pixels."""
    K = spec.camera
    planes = _planes(spec)
    D = np.choose(plane_index, [p[0] for p in planes])
    u = X[..., 0] / D * K.fx + 1000.0 * plane_index
    v = X[..., 1] / D * K.fy
    return u, v


def _shade(spec: SceneSpec, X, plane_index):
    u, v = _texture_coords(spec, X, plane_index)
    img = _value_noise(u, v, spec.texture_seed)
    flat = _flat_blocks(u, v, spec.texture_seed, spec.flat_fraction)
    return np.where(flat, 0.5, img), flat


def render_view1(spec: SceneSpec):
    w, h = spec.image_size
    K = spec.camera
    depth = _view1_depth(spec)
    grid = pixel_grid(h, w)
    X = np.concatenate([K.normalize(grid), np.ones((h, w, 1))], axis=-1) * depth[..., None]
    idx = np.zeros((h, w), dtype=np.int64)
    if spec.kind == "two_planes":
        idx[:, depth[0] != spec.plane_depths[0]] = 1
    return _shade(spec, X, idx)


def _view2_rays(spec: SceneSpec):
    w, h = spec.image_size
    K = spec.camera
    R, t = spec.pose.rotation, spec.pose.translation
    grid = pixel_grid(h, w)
    rays2 = np.concatenate([K.normalize(grid), np.ones((h, w, 1))], axis=-1)
    return -R.T @ t, rays2 @ R  # camera-2 centre and ray directions in the camera-1 frame


def render_second_view(sample: SyntheticSample):
    """Synthesize view 2 by inverse warping view 1 through the scene geometry.

    Returns ``(image2, valid)``; ``valid`` is False where the view-2 pixel sees
    no surface or its source lies outside view 1.
    """
    spec = sample.spec
    if spec.kind == "point_cloud" or sample.image1 is None:
        raise ValueError("point_cloud scenes have no raster to render")
    K = spec.camera
    origin, dirs = _view2_rays(spec)
    s, which = _cast(origin, dirs, _planes(spec))
    hit = which >= 0
    P = origin + np.where(hit, s, 1.0)[..., None] * dirs
    x1 = K.fx * P[..., 0] / P[..., 2] + K.cx
    y1 = K.fy * P[..., 1] / P[..., 2] + K.cy
    vals, inside = bilinear(sample.image1, np.where(hit, x1, -1.0), np.where(hit, y1, -1.0))
    valid = hit & inside
    return np.where(valid, vals, 0.0), valid


def occlusion_mask(spec: SceneSpec) -> np.ndarray:
    """View-1 pixels whose surface point is hidden behind another surface in view 2."""
    w, h = spec.image_size
    K = spec.camera
    if spec.kind != "two_planes":
        return np.zeros((h, w), dtype=bool)
    depth = _view1_depth(spec)
    grid = pixel_grid(h, w)
    X = np.concatenate([K.normalize(grid), np.ones((h, w, 1))], axis=-1) * depth[..., None]
    origin = -spec.pose.rotation.T @ spec.pose.translation
    dirs = X - origin
    s, _ = _cast(origin, dirs, _planes(spec))
    # The point itself sits at s == 1 on its own ray.
    return s < 1.0 - 1e-9


# ---------------------------------------------------------------- generation

def _pick_outliers(rng, spec, candidates, flat, n_out, shape):
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    if n_out == 0:
        return out
    flat_idx = np.flatnonzero(candidates.ravel() & flat.ravel()) if flat is not None else np.array([], dtype=int)
    all_idx = np.flatnonzero(candidates.ravel())
    if spec.outlier_mode in ("flat", "flat_static"):
        k = min(n_out, flat_idx.size)
        chosen = rng.choice(flat_idx, size=k, replace=False) if k else np.array([], dtype=int)
        if k < n_out:
            rest = np.setdiff1d(all_idx, chosen)
            chosen = np.concatenate([chosen, rng.choice(rest, size=n_out - k, replace=False)])
    elif spec.outlier_mode == "dynamic":
        centre = rng.choice(all_idx)
        cy, cx = divmod(int(centre), w)
        ys, xs = np.divmod(all_idx, w)
        cheb = np.maximum(np.abs(ys - cy), np.abs(xs - cx))
        order = np.lexsort((all_idx, cheb))
        chosen = all_idx[order[:n_out]]
    else:
        chosen = rng.choice(all_idx, size=n_out, replace=False)
    out.ravel()[chosen] = True
    return out


def generate(spec: SceneSpec) -> SyntheticSample:
    """Build a deterministic sample for ``spec`` (all randomness from ``spec.seed``)."""
    w, h = spec.image_size
    K = spec.camera
    rng = np.random.default_rng(spec.seed)
    image1 = flat = None

    if spec.kind == "point_cloud":
        near, far = spec.depth_range
        R, t = spec.pose.rotation, spec.pose.translation
        depth = np.zeros((h, w))
        need = spec.n_points
        taken = np.zeros(h * w, dtype=bool)
        for _ in range(50):
            free = np.flatnonzero(~taken)
            if need == 0 or free.size == 0:
                break
            idx = rng.choice(free, size=min(free.size, 2 * need), replace=False)
            d = near + rng.uniform(size=idx.size) * (far - near)
            ys, xs = np.divmod(idx, w)
            X = np.column_stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones(idx.size)]) * d[:, None]
            X2 = X @ R.T + t
            with np.errstate(divide="ignore", invalid="ignore"):
                u2 = K.fx * X2[:, 0] / X2[:, 2] + K.cx
                v2 = K.fy * X2[:, 1] / X2[:, 2] + K.cy
            ok = (X2[:, 2] > 0) & (u2 >= 0) & (u2 <= w - 1) & (v2 >= 0) & (v2 <= h - 1)
            idx, d = idx[ok][:need], d[ok][:need]
            taken[idx] = True
            depth.ravel()[idx] = d
            need -= idx.size
        if need == spec.n_points:
            raise DegenerateError("scene lies entirely behind or outside the second camera")
        if need:
            raise DegenerateError(f"could only place {spec.n_points - need} of {spec.n_points} points in view 2")
    else:
        depth = _view1_depth(spec)
        image1, flat = render_view1(spec)

    gt_depth = DepthMap(depth)
    gt_flow = rigid_flow(gt_depth, spec.pose, K)
    if not gt_flow.valid.any():
        raise DegenerateError("scene lies entirely behind the second camera")

    valid = gt_flow.valid
    n_valid = int(valid.sum())
    n_out = int(np.floor(spec.outlier_ratio * n_valid + 0.5))
    outliers = _pick_outliers(rng, spec, valid, flat, n_out, (h, w))

    uv = gt_flow.uv.copy()
    inl = valid & ~outliers
    if spec.noise_px > 0:
        uv[inl] += rng.normal(scale=spec.noise_px, size=(int(inl.sum()), 2))
    if n_out:
        grid = pixel_grid(h, w)
        if spec.outlier_mode == "flat_static":
            # A matcher with no texture to lock onto reports no motion.
            uv[outliers] = 0.0
        elif spec.outlier_mode == "dynamic":
            off = rng.uniform(-1.0, 1.0, size=2)
            off = off / np.linalg.norm(off) * rng.uniform(8.0, 20.0)
            uv[outliers] += off
        else:
            targets = np.column_stack([rng.uniform(0, w - 1, n_out), rng.uniform(0, h - 1, n_out)])
            uv[outliers] = targets - grid[outliers]
    flow = FlowField(uv, valid)

    sample = SyntheticSample(spec, gt_depth, gt_flow, flow, outliers, image1=image1, flat_mask=flat,
                             occluded=occlusion_mask(spec))
    if image1 is not None:
        image2, valid2 = render_second_view(sample)
        sample = replace(sample, image2=image2, image2_valid=valid2)
    return sample


def export_sample(sample: SyntheticSample, out_dir) -> None:
    """Write a sample as flow/depth/image files plus ``manifest.txt``."""
    from pathlib import Path

    from . import flow_io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = sample.K
    flow_io.write_flow(out / "flow.flo", sample.flow)
    flow_io.write_flow(out / "gt_flow.flo", sample.gt_flow)
    flow_io.write_depth(out / "depth.pfm", sample.gt_depth)
    flow_io.write_intrinsics(out / "intrinsics.txt", K)
    flow_io.write_trajectory(out / "pose.txt", [sample.gt_pose])
    flow_io.write_mask(out / "outliers.png", sample.outlier_mask)
    flow_io.write_mask(out / "covisible.png", sample.covisible)
    if sample.image1 is not None:
        flow_io.write_image(out / "image1.png", sample.image1)
        flow_io.write_image(out / "image2.png", sample.image2)
    spec = sample.spec
    lines = [
        f"kind={spec.kind}",
        f"width={spec.image_size[0]}",
        f"height={spec.image_size[1]}",
        f"seed={spec.seed}",
        f"alpha_gt={flow_io.fmt(sample.alpha_gt)}",
        f"pose={flow_io.pose_line(sample.gt_pose)}",
        f"intrinsics={' '.join(flow_io.fmt(v) for v in (K.fx, K.fy, K.cx, K.cy))}",
        f"noise_px={flow_io.fmt(spec.noise_px)}",
        f"outlier_ratio={flow_io.fmt(spec.outlier_ratio)}",
        f"outlier_mode={spec.outlier_mode}",
        f"n_valid={int(sample.flow.valid.sum())}",
        f"n_outliers={sample.n_outliers}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
