import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twoview.geometry import CameraIntrinsics, RigidTransform
from twoview.synthetic import random_pose

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def K():
    return CameraIntrinsics(500.0, 480.0, 320.0, 240.0)


def random_scene(rng, n=50, *, K=None, max_angle_deg=20.0, baseline=1.0, depth=(2.0, 10.0)):
    """Random pose plus ``n`` noiseless pixel correspondences of points in front of both cameras."""
    K = K or CameraIntrinsics(500.0, 480.0, 320.0, 240.0)
    while True:
        pose = random_pose(rng, max_angle_deg=max_angle_deg, baseline=baseline)
        x1 = np.column_stack([rng.uniform(0, 640, 4 * n), rng.uniform(0, 480, 4 * n)])
        d = rng.uniform(*depth, 4 * n)
        X = np.column_stack([K.normalize(x1), np.ones(4 * n)]) * d[:, None]
        X2 = pose.apply(X)
        ok = X2[:, 2] > 0.1
        if ok.sum() >= n:
            X, x1 = X[ok][:n], x1[ok][:n]
            return pose, X, x1, K.project(pose.apply(X))


def rotation_error(Ra, Rb) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


__all__ = ["random_scene", "rotation_error", "unit", "RigidTransform"]
