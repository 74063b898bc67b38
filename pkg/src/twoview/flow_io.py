"""Readers and writers for flow, depth, poses, intrinsics, images and masks.

Formats
-------
* ``.flo`` (Middlebury): float32 magic 202021.25, int32 width, int32 height,
  then row-major interleaved float32 ``(u, v)``.  Components above 1e9 mark
  unknown flow.
* ``.pfm`` depth: grayscale ``Pf`` header, little-endian, rows stored bottom-up;
  non-positive values are invalid.
* ``.png`` depth: 16-bit grayscale, ``depth = value / 256``, zero is invalid.
* trajectories: one pose per line, 12 numbers = row-major 3x4 ``[R | t]``.
"""
from __future__ import annotations

import re
from pathlib import Path

import cv2
import numpy as np

from .data import FLOW_INVALID_SENTINEL, DepthMap, FlowField, PixelMask, Trajectory
from .errors import FileFormatError
from .geometry import CameraIntrinsics, RigidTransform

FLO_MAGIC = 202021.25
PNG_DEPTH_SCALE = 256.0


def fmt(x: float) -> str:
    """Shortest text that round-trips a float (normalises -0 to 0)."""
    return repr(float(x) + 0.0)


# ---------------------------------------------------------------- flow

def write_flow(path, flow: FlowField) -> None:
    uv = flow.uv.astype(np.float32)
    bad = ~flow.valid & np.all(np.abs(uv) <= 1e9, axis=2)
    uv[bad] = FLOW_INVALID_SENTINEL
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes() + np.array([flow.width, flow.height], dtype="<i4").tobytes()
    Path(path).write_bytes(header + uv.astype("<f4").tobytes())


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12 or np.frombuffer(data[:4], dtype="<f4")[0] != np.float32(FLO_MAGIC):
        raise FileFormatError(f"{path}: not a flow file (bad magic number)")
    w, h = (int(v) for v in np.frombuffer(data[4:12], dtype="<i4"))
    if w <= 0 or h <= 0:
        raise FileFormatError(f"{path}: corrupt flow file (dimensions {w}x{h})")
    n = 2 * w * h
    if len(data) - 12 != 4 * n:
        raise FileFormatError(f"{path}: corrupt flow file (expected {4 * n} payload bytes, got {len(data) - 12})")
    uv = np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2).astype(np.float64)
    return FlowField(uv)


def flow_to_correspondences(flow: FlowField, mask: PixelMask | None = None):
    """Pixel pairs ``(x, x + u(x))`` for every valid (and masked-in) pixel, row-major.

    Returns two (N, 2) arrays.
    """
    keep = flow.valid
    if mask is not None:
        if mask.shape != flow.shape:
            raise ValueError(f"mask shape {mask.shape} does not match flow shape {flow.shape}")
        keep = keep & mask.mask
    ys, xs = np.nonzero(keep)
    x1 = np.column_stack([xs, ys]).astype(np.float64)
    return x1, x1 + flow.uv[ys, xs]


# ---------------------------------------------------------------- depth

def write_depth(path, depth: DepthMap) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    d = np.where(depth.valid, depth.depth, 0.0)
    if ext == ".pfm":
        header = f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii")
        path.write_bytes(header + np.flipud(d).astype("<f4").tobytes())
    elif ext == ".png":
        q = np.clip(np.round(d * PNG_DEPTH_SCALE), 0, 65535).astype(np.uint16)
        q[depth.valid & (q == 0)] = 1
        if not cv2.imwrite(str(path), q):
            raise OSError(f"could not write {path}")
    else:
        raise FileFormatError(f"{path}: unknown depth extension {ext!r} (use .pfm or .png)")


def read_pfm(path) -> np.ndarray:
    """Grayscale PFM as a float64 array with rows top-down."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(\S+)").match(data, pos)
        if m is None:
            raise FileFormatError(f"{path}: malformed PFM header")
        tokens.append(m.group(1))
        pos = m.end()
    pos += 1  # single whitespace byte after the scale token
    if tokens[0] != b"Pf":
        raise FileFormatError(f"{path}: malformed PFM header (expected grayscale 'Pf', got {tokens[0]!r})")
    try:
        w, h, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
    except ValueError as exc:
        raise FileFormatError(f"{path}: malformed PFM header") from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise FileFormatError(f"{path}: malformed PFM header")
    dtype = "<f4" if scale < 0 else ">f4"
    payload = data[pos:]
    if len(payload) != 4 * w * h:
        raise FileFormatError(f"{path}: PFM payload has {len(payload)} bytes, expected {4 * w * h}")
    return np.flipud(np.frombuffer(payload, dtype=dtype).reshape(h, w)).astype(np.float64)


def read_depth(path) -> DepthMap:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".pfm":
        d = read_pfm(path)
        return DepthMap(np.where(np.isfinite(d) & (d > 0), d, 0.0))
    if ext == ".png":
        raw = _imread(path)
        if raw is None:
            raise FileFormatError(f"{path}: cannot decode PNG")
        if raw.ndim != 2:
            raise FileFormatError(f"{path}: depth PNG must be single-channel")
        return DepthMap(raw.astype(np.float64) / PNG_DEPTH_SCALE)
    raise FileFormatError(f"{path}: unknown depth extension {ext!r} (use .pfm or .png)")


def write_pfm(path, array) -> None:
    a = np.asarray(array, dtype=np.float64)
    header = f"Pf\n{a.shape[1]} {a.shape[0]}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(a).astype("<f4").tobytes())


# ---------------------------------------------------------------- poses

def pose_line(pose: RigidTransform) -> str:
    M = np.hstack([pose.rotation, pose.translation[:, None]])
    return " ".join(fmt(v) for v in M.ravel())


def parse_pose_line(line: str, where: str = "") -> RigidTransform:
    parts = line.split()
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise FileFormatError(f"{where}: pose line has unparseable values") from exc
    if len(vals) != 12:
        raise FileFormatError(f"{where}: pose line must have 12 numbers, found {len(vals)}")
    M = np.array(vals).reshape(3, 4)
    return RigidTransform(M[:, :3], M[:, 3])


def write_trajectory(path, poses) -> None:
    poses = poses.poses if isinstance(poses, Trajectory) else poses
    Path(path).write_text("".join(pose_line(p) + "\n" for p in poses))


def read_trajectory(path) -> Trajectory:
    poses = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            poses.append(parse_pose_line(line, f"{path}:{n}"))
    return Trajectory(tuple(poses))


# ---------------------------------------------------------------- intrinsics

def read_intrinsics(path) -> CameraIntrinsics:
    """Either plain ``fx fy cx cy`` or a KITTI calibration file (``P0:`` 3x4 line)."""
    text = Path(path).read_text()
    proj = {}
    for line in text.splitlines():
        m = re.match(r"\s*(P\d)\s*:(.*)", line)
        if m:
            proj[m.group(1)] = m.group(2)
    try:
        if proj:
            vals = [float(v) for v in proj.get("P0", next(iter(proj.values()))).split()]
            if len(vals) != 12:
                raise FileFormatError(f"{path}: projection line must have 12 numbers")
            return CameraIntrinsics.from_matrix(np.array(vals).reshape(3, 4)[:, :3])
        vals = [float(v) for v in text.split()]
    except ValueError as exc:
        raise FileFormatError(f"{path}: unparseable intrinsics") from exc
    if len(vals) != 4:
        raise FileFormatError(f"{path}: expected 'fx fy cx cy', found {len(vals)} numbers")
    return CameraIntrinsics(*vals)


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text("\n".join(fmt(v) for v in (K.fx, K.fy, K.cx, K.cy)) + "\n")


# ---------------------------------------------------------------- rasters

def _imread(path) -> np.ndarray | None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path}: no such file")
    return cv2.imread(str(path), cv2.IMREAD_UNCHANGED)


def read_image(path) -> np.ndarray:
    """Grayscale raster as float64 in [0, 1] (8/16-bit PNG or PGM; colour is averaged)."""
    raw = _imread(path)
    if raw is None:
        raise FileFormatError(f"{path}: cannot decode image")
    if raw.ndim == 3:
        raw = raw[..., :3].mean(axis=2).astype(raw.dtype)
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / 65535.0
    return raw.astype(np.float64)


def write_image(path, img) -> None:
    """Write a [0, 1] grayscale raster as 8-bit PNG/PGM."""
    q = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"could not write {path}")


def write_mask(path, mask) -> None:
    m = mask.mask if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    if not cv2.imwrite(str(path), m.astype(np.uint8) * 255):
        raise OSError(f"could not write {path}")


def read_mask(path) -> PixelMask:
    raw = _imread(path)
    if raw is None:
        raise FileFormatError(f"{path}: cannot decode mask")
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    return PixelMask(raw > 0)


def read_weights(path) -> np.ndarray:
    """External per-pixel weight map (uncertainty / confidence): PFM floats or PNG scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_image(path)


def write_metrics(path, metrics: dict) -> None:
    """Machine-readable ``key=value`` lines in the given key order."""
    Path(path).write_text("".join(f"{k}={fmt(v) if isinstance(v, float) else v}\n" for k, v in metrics.items()))


def read_metrics(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            try:
                out[k.strip()] = float(v)
            except ValueError:
                out[k.strip()] = v.strip()
    return out


from .keypoints import detect_keypoint_mask  # noqa: E402  (re-export)

__all__ = [
    "detect_keypoint_mask",
    "flow_to_correspondences",
    "read_depth",
    "read_flow",
    "read_image",
    "read_intrinsics",
    "read_mask",
    "read_metrics",
    "read_pfm",
    "read_trajectory",
    "read_weights",
    "write_depth",
    "write_flow",
    "write_image",
    "write_intrinsics",
    "write_mask",
    "write_metrics",
    "write_pfm",
    "write_trajectory",
]
