"""Difference-of-Gaussians keypoint locations (detection only, no descriptors).

The scale space is built at full resolution for every octave instead of
decimating, so the detector commutes exactly with integer image shifts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import PixelMask


@dataclass(frozen=True)
class DogParams:
    n_octaves: int = 3
    scales_per_octave: int = 3
    sigma0: float = 1.6
    assumed_blur: float = 0.5
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 1

    def sigmas(self) -> np.ndarray:
        k = 2.0 ** (1.0 / self.scales_per_octave)
        n = self.n_octaves * self.scales_per_octave + 3
        return self.sigma0 * k ** np.arange(n)


def _as_unit_range(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float64) / 65535.0
    return img.astype(np.float64)


def dog_stack(image, params: DogParams = DogParams()) -> np.ndarray:
    img = _as_unit_range(image)
    blurred = [
        ndimage.gaussian_filter(img, np.sqrt(max(s * s - params.assumed_blur ** 2, 0.0)), mode="reflect")
        for s in params.sigmas()
    ]
    return np.diff(np.stack(blurred), axis=0)


def detect_keypoints(image, params: DogParams = DogParams()) -> np.ndarray:
    """(N, 3) integer array of ``(x, y, scale_index)`` for DoG extrema passing both tests."""
    img = _as_unit_range(image)
    if img.ndim != 2:
        raise ValueError("keypoint detection needs a grayscale image")
    if min(img.shape) < 16:
        raise ValueError("image must be at least 16x16")
    D = dog_stack(img, params)
    mx = ndimage.maximum_filter(D, size=3, mode="nearest")
    mn = ndimage.minimum_filter(D, size=3, mode="nearest")
    ext = ((D == mx) | (D == mn)) & (np.abs(D) >= params.contrast_threshold)
    # Only interior scales have both neighbours; strict extremum excludes flat plateaus.
    ext[0] = ext[-1] = False
    b = max(params.border, 1)
    ext[:, :b] = ext[:, -b:] = False
    ext[:, :, :b] = ext[:, :, -b:] = False
    s, y, x = np.nonzero(ext)
    if s.size == 0:
        return np.zeros((0, 3), dtype=np.int64)

    d = D[s, y, x]
    flat = np.ones_like(d, dtype=bool)
    for ds in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if ds or dy or dx:
                    flat &= D[s + ds, y + dy, x + dx] != d
    s, y, x, d = s[flat], y[flat], x[flat], d[flat]

    dxx = D[s, y, x + 1] + D[s, y, x - 1] - 2 * d
    dyy = D[s, y + 1, x] + D[s, y - 1, x] - 2 * d
    dxy = (D[s, y + 1, x + 1] - D[s, y + 1, x - 1] - D[s, y - 1, x + 1] + D[s, y - 1, x - 1]) / 4.0
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    r = params.edge_ratio
    keep = (det > 0) & (tr * tr * r < (r + 1) ** 2 * det)
    return np.column_stack([x[keep], y[keep], s[keep]]).astype(np.int64)


def detect_keypoint_mask(image, params: DogParams = DogParams()) -> PixelMask:
    """Boolean mask of DoG keypoint locations; a constant image gives an empty mask."""
    img = _as_unit_range(image)
    mask = np.zeros(img.shape, dtype=bool)
    kp = detect_keypoints(img, params)
    mask[kp[:, 1], kp[:, 0]] = True
    return PixelMask(mask)
