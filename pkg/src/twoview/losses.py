"""Training losses for depth and flow supervision, with analytic gradients.

All losses are sums over jointly valid pixels.  Depth inputs may be DepthMap
instances or plain arrays (positive finite entries count as valid).
"""
from __future__ import annotations

import numpy as np

from .data import DepthMap, FlowField


def _depth_arrays(pred, gt):
    """Depth values and joint validity mask for a (pred, gt) pair."""
    def unpack(d):
        if isinstance(d, DepthMap):
            return d.depth, d.valid
        a = np.asarray(d, dtype=np.float64)
        return a, np.isfinite(a) & (a > 0)

    p, pv = unpack(pred)
    g, gv = unpack(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    joint = pv & gv
    if not joint.any():
        raise ValueError("prediction and ground truth share no valid pixels")
    return p, g, joint


def scale_invariant_loss(pred, gt) -> float:
    """``sum (log d - log d_hat + eta)^2`` with ``eta`` the mean of ``log d_hat - log d``.

    Zero whenever ``pred`` is a positive multiple of ``gt``.
    """
    p, g, m = _depth_arrays(pred, gt)
    diff = np.log(p[m]) - np.log(g[m])  # log d_hat - log d
    r = diff - diff.mean()
    return float(np.sum(r * r))


def scale_invariant_loss_grad(pred, gt) -> np.ndarray:
    """Gradient of ``scale_invariant_loss`` with respect to the predicted depths (zero off-mask)."""
    p, g, m = _depth_arrays(pred, gt)
    diff = np.log(p[m]) - np.log(g[m])
    r = diff - diff.mean()
    # The mean term's derivative cancels because sum(r) = 0.
    out = np.zeros_like(p)
    out[m] = 2.0 * r / p[m]
    return out


def huber(z, symmetric: bool = False) -> np.ndarray:
    """``0.5 z^2`` for ``|z| < 1``; otherwise ``|z - 0.5|`` as printed, or ``|z| - 0.5`` if ``symmetric``.

    The printed branch is continuous at ``z = 1`` but jumps at ``z = -1``
    (0.5 vs 1.5); the symmetric form is the usual smooth Huber.
    """
    z = np.asarray(z, dtype=np.float64)
    outer = np.abs(z) - 0.5 if symmetric else np.abs(z - 0.5)
    return np.where(np.abs(z) < 1.0, 0.5 * z * z, outer)


def huber_grad(z, symmetric: bool = False) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    outer = np.sign(z) if symmetric else np.sign(z - 0.5)
    return np.where(np.abs(z) < 1.0, z, outer)


def huber_depth_loss(pred, gt, alpha_gt: float, *, symmetric: bool = False) -> float:
    """``sum huber(alpha_gt * d_hat - d)`` over jointly valid pixels."""
    if not alpha_gt > 0:
        raise ValueError("alpha_gt must be positive")
    p, g, m = _depth_arrays(pred, gt)
    return float(np.sum(huber(alpha_gt * p[m] - g[m], symmetric)))


def huber_depth_loss_grad(pred, gt, alpha_gt: float, *, symmetric: bool = False) -> np.ndarray:
    """Gradient of ``huber_depth_loss`` with respect to the predicted depths (zero off-mask)."""
    if not alpha_gt > 0:
        raise ValueError("alpha_gt must be positive")
    p, g, m = _depth_arrays(pred, gt)
    out = np.zeros_like(p)
    out[m] = alpha_gt * huber_grad(alpha_gt * p[m] - g[m], symmetric)
    return out


def _flow_arrays(pred, ref):
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    joint = pred.valid & ref.valid
    if not joint.any():
        raise ValueError("flow fields share no valid pixels")
    return pred.uv[joint] - ref.uv[joint], joint


def flow_loss(pred_flow: FlowField, rigid: FlowField) -> float:
    """``sum |u_hat - u|^2`` over jointly valid pixels."""
    d, _ = _flow_arrays(pred_flow, rigid)
    return float(np.sum(d * d))


def flow_loss_grad(pred_flow: FlowField, rigid: FlowField) -> np.ndarray:
    """(H, W, 2) gradient of ``flow_loss`` with respect to the predicted flow."""
    d, joint = _flow_arrays(pred_flow, rigid)
    out = np.zeros(pred_flow.uv.shape)
    out[joint] = 2.0 * d
    return out


def total_loss(depth_term: float, flow_term: float, lam: float = 1.0) -> float:
    """``L_depth + lam * L_flow``; with ``lam == 0`` the flow term is dropped exactly (even if non-finite)."""
    if lam == 0:
        return float(depth_term)
    return float(depth_term + lam * flow_term)
