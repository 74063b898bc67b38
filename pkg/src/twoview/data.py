"""Dense per-pixel containers shared by every stage of the pipeline.

All arrays are indexed ``[row, col]``; pixel ``(x, y)`` means column ``x``,
row ``y``, with pixel centres on integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform

# Middlebury convention: any component above this magnitude marks an unknown flow.
FLOW_INVALID_THRESHOLD = 1e9
FLOW_INVALID_SENTINEL = 1e10


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement ``x' = x + uv[y, x]`` with a validity mask."""

    uv: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64)
        if uv.ndim != 3 or uv.shape[2] != 2 or uv.shape[0] == 0 or uv.shape[1] == 0:
            raise ValueError(f"flow must have shape (H, W, 2) with H, W > 0, got {uv.shape}")
        finite = np.all(np.isfinite(uv), axis=2)
        small = np.all(np.abs(uv) <= FLOW_INVALID_THRESHOLD, axis=2)
        if self.valid is None:
            valid = finite & small
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != uv.shape[:2]:
                raise ValueError("validity mask does not match flow dimensions")
            if np.any(valid & ~finite):
                raise ValueError("valid flow entries must be finite")
        object.__setattr__(self, "uv", _frozen(uv, np.float64))
        object.__setattr__(self, "valid", _frozen(valid, bool))

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.uv.shape[:2]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth in scene units; entries are valid only where positive and finite."""

    depth: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2 or d.size == 0:
            raise ValueError(f"depth must be a non-empty 2-D array, got shape {d.shape}")
        usable = np.isfinite(d) & (d > 0)
        if self.valid is None:
            valid = usable
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != d.shape:
                raise ValueError("validity mask does not match depth dimensions")
            if np.any(valid & ~usable):
                raise ValueError("valid depth entries must be strictly positive and finite")
        object.__setattr__(self, "depth", _frozen(d, np.float64))
        object.__setattr__(self, "valid", _frozen(valid, bool))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def scaled(self, factor: float) -> "DepthMap":
        return DepthMap(np.where(self.valid, self.depth * factor, 0.0), self.valid)


@dataclass(frozen=True, eq=False)
class PixelMask:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be 2-D")
        object.__setattr__(self, "mask", _frozen(m, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Absolute world-from-camera poses with strictly increasing frame indices."""

    poses: tuple[RigidTransform, ...] = ()
    indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        poses = tuple(self.poses)
        indices = tuple(int(i) for i in self.indices) if self.indices else tuple(range(len(poses)))
        if len(indices) != len(poses):
            raise ValueError("one frame index per pose is required")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("frame indices must be strictly increasing")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])

    def matrices(self) -> np.ndarray:
        """Stack of 4x4 homogeneous matrices, shape (N, 4, 4)."""
        if not self.poses:
            return np.zeros((0, 4, 4))
        return np.array([p.matrix() for p in self.poses])

    @classmethod
    def from_matrices(cls, mats, indices=()) -> "Trajectory":
        mats = np.asarray(mats, dtype=np.float64)
        return cls(tuple(RigidTransform(m[:3, :3], m[:3, 3]) for m in mats), tuple(indices))
