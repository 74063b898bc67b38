import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from twoview import synthetic
from twoview.errors import DegenerateError
from twoview.flow_io import read_metrics
from twoview.geometry import RigidTransform, essential_from_pose, pixel_grid, rigid_flow, rotation_about

seeds = st.integers(0, 2**31 - 1)


def _homography(K, pose, depth):
    """View-1 to view-2 map induced by the fronto-parallel plane Z = depth."""
    n = np.array([0.0, 0.0, 1.0])
    return K.K @ (pose.rotation + np.outer(pose.translation, n) / depth) @ K.K_inv


def _apply_h(H, pts):
    p = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ H.T
    return p[..., :2] / p[..., 2:]


# ---------------------------------------------------------------- geometry of samples

def test_noiseless_point_cloud_satisfies_the_epipolar_constraint():
    pose = synthetic.random_pose(np.random.default_rng(0))
    s = synthetic.generate(synthetic.SceneSpec(kind="point_cloud", pose=pose, n_points=100))
    x1, x2 = s.correspondences()
    assert len(x1) == 100
    E = essential_from_pose(pose)
    n1 = np.column_stack([s.K.normalize(x1), np.ones(100)])
    n2 = np.column_stack([s.K.normalize(x2), np.ones(100)])
    assert np.abs(np.einsum("ij,jk,ik->i", n2, E, n1)).max() < 1e-12


def test_outlier_count_is_exact():
    spec = synthetic.SceneSpec(kind="point_cloud", n_points=1000, outlier_ratio=0.4,
                               pose=synthetic.random_pose(np.random.default_rng(1)))
    s = synthetic.generate(spec)
    assert s.n_outliers == 400
    assert not np.any(s.outlier_mask & ~s.flow.valid)


def test_plane_flow_matches_the_plane_homography():
    pose = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    s = synthetic.generate(synthetic.SceneSpec(kind="textured_plane", plane_depth=5.0, pose=pose))
    h, w = s.gt_flow.shape
    grid = pixel_grid(h, w)
    expect = _apply_h(_homography(s.K, pose, 5.0), grid) - grid
    assert s.gt_flow.valid.all()
    assert np.abs(s.gt_flow.uv - expect).max() < 1e-9


def test_tilted_pose_flow_matches_the_plane_homography():
    pose = RigidTransform(rotation_about([0.2, 1.0, -0.1], 0.05), [0.3, -0.1, 0.2])
    s = synthetic.generate(synthetic.SceneSpec(kind="textured_plane", plane_depth=4.0, pose=pose))
    grid = pixel_grid(*s.gt_flow.shape)
    expect = _apply_h(_homography(s.K, pose, 4.0), grid) - grid
    v = s.gt_flow.valid
    assert np.abs(s.gt_flow.uv[v] - expect[v]).max() < 1e-9


@settings(max_examples=10)
@given(seeds)
def test_gt_flow_equals_rigid_flow_of_gt_depth(seed):
    rng = np.random.default_rng(seed)
    kind = ["point_cloud", "textured_plane", "two_planes"][seed % 3]
    spec = synthetic.SceneSpec(kind=kind, image_size=(64, 48), pose=synthetic.random_pose(rng, baseline=0.3),
                               n_points=200, seed=seed)
    s = synthetic.generate(spec)
    ref = rigid_flow(s.gt_depth, s.gt_pose, s.K)
    assert np.array_equal(ref.valid, s.gt_flow.valid)
    assert np.array_equal(ref.uv[ref.valid], s.gt_flow.uv[ref.valid])
    assert s.alpha_gt == pytest.approx(np.linalg.norm(s.gt_pose.translation))


@settings(max_examples=10)
@given(seeds, st.sampled_from([0.25, 4.0]))
def test_scaling_scene_and_translation_leaves_flow_unchanged(seed, alpha):
    rng = np.random.default_rng(seed)
    kind = ["point_cloud", "textured_plane", "two_planes"][seed % 3]
    spec = synthetic.SceneSpec(kind=kind, image_size=(64, 48), pose=synthetic.random_pose(rng, baseline=0.3),
                               n_points=200, noise_px=0.5, outlier_ratio=0.2, seed=seed)
    a, b = synthetic.generate(spec), synthetic.generate(spec.scaled(alpha))
    assert np.array_equal(a.gt_flow.uv, b.gt_flow.uv)
    assert np.array_equal(a.flow.uv, b.flow.uv)
    assert np.array_equal(b.gt_depth.depth, alpha * a.gt_depth.depth)


@settings(max_examples=10)
@given(seeds)
def test_generation_is_deterministic(seed):
    spec = synthetic.SceneSpec(kind="two_planes", image_size=(64, 48), noise_px=1.0, outlier_ratio=0.3,
                               flat_fraction=0.3, outlier_mode="flat", seed=seed, texture_seed=seed)
    a, b = synthetic.generate(spec), synthetic.generate(spec)
    assert np.array_equal(a.flow.uv, b.flow.uv)
    assert np.array_equal(a.image1, b.image1) and np.array_equal(a.image2, b.image2)
    assert np.array_equal(a.outlier_mask, b.outlier_mask)


def test_noise_is_applied_to_inliers_only():
    spec = synthetic.SceneSpec(kind="point_cloud", n_points=2000, noise_px=1.0, outlier_ratio=0.25,
                               pose=synthetic.random_pose(np.random.default_rng(3)))
    s = synthetic.generate(spec)
    inl = s.flow.valid & ~s.outlier_mask
    resid = (s.flow.uv - s.gt_flow.uv)[inl]
    assert abs(resid.std() - 1.0) < 0.05
    assert abs(resid.mean()) < 0.05


# ---------------------------------------------------------------- outlier modes

def test_flat_outliers_sit_in_flat_regions():
    spec = synthetic.SceneSpec(kind="textured_plane", flat_fraction=0.4, outlier_ratio=0.2, outlier_mode="flat")
    s = synthetic.generate(spec)
    assert s.n_outliers == round(0.2 * s.flow.valid.sum())
    assert np.all(s.flat_mask[s.outlier_mask])


def test_flat_static_outliers_report_zero_motion():
    spec = synthetic.SceneSpec(kind="textured_plane", flat_fraction=0.4, outlier_ratio=0.2,
                               outlier_mode="flat_static")
    s = synthetic.generate(spec)
    assert np.all(s.flat_mask[s.outlier_mask])
    assert np.all(s.flow.uv[s.outlier_mask] == 0.0)


def test_dynamic_outliers_form_one_coherently_moving_block():
    spec = synthetic.SceneSpec(kind="textured_plane", outlier_ratio=0.05, outlier_mode="dynamic", seed=4)
    s = synthetic.generate(spec)
    d = (s.flow.uv - s.gt_flow.uv)[s.outlier_mask]
    assert np.allclose(d, d[0], atol=1e-12) and 8 <= np.linalg.norm(d[0]) <= 20
    _, n = ndimage.label(s.outlier_mask)
    assert n == 1


def test_flat_regions_are_actually_flat():
    s = synthetic.generate(synthetic.SceneSpec(kind="textured_plane", flat_fraction=0.5))
    assert 0.2 < s.flat_mask.mean() < 0.8
    assert np.all(s.image1[s.flat_mask] == 0.5)
    assert s.image1[~s.flat_mask].std() > 0.05


# ---------------------------------------------------------------- second view

def test_identity_pose_renders_the_same_image():
    s = synthetic.generate(synthetic.SceneSpec(kind="two_planes", pose=RigidTransform(np.eye(3), [0, 0, 0])))
    assert s.image2_valid.all()
    assert np.abs(s.image2 - s.image1).max() < 1e-12


def test_plane_rendering_matches_the_homography_warp():
    pose = RigidTransform(rotation_about([0, 1, 0], 0.02), [0.4, 0.1, 0.05])
    s = synthetic.generate(synthetic.SceneSpec(kind="textured_plane", plane_depth=5.0, pose=pose))
    h, w = s.image1.shape
    src = _apply_h(np.linalg.inv(_homography(s.K, pose, 5.0)), pixel_grid(h, w))
    ref = ndimage.map_coordinates(s.image1, [src[..., 1], src[..., 0]], order=1, mode="nearest")
    inside = (src[..., 0] >= 0) & (src[..., 0] <= w - 1) & (src[..., 1] >= 0) & (src[..., 1] <= h - 1)
    inside = ndimage.binary_erosion(inside, iterations=2)
    assert inside.mean() > 0.5
    assert np.abs(s.image2 - ref)[inside].max() < 1e-6
    assert np.array_equal(s.image2_valid[inside], np.ones(inside.sum(), bool))


def _zbuffer_occlusion(s, ss=4):
    """Supersampled z-buffer: which view-1 pixels are covered in view 2 by a nearer surface."""
    h, w = s.image1.shape
    K, pose = s.K, s.gt_pose
    # Dense surface samples across and beyond view 1 so off-screen occluders are included.
    xs = np.arange(-w, 2 * w, 1.0 / ss)
    ys = np.arange(0, h, 1.0 / ss)
    gx, gy = np.meshgrid(xs, ys)
    b = s.spec.split * w - 0.5
    D = np.where(gx < b, s.spec.plane_depths[0], s.spec.plane_depths[1])
    X = np.stack([(gx - K.cx) / K.fx * D, (gy - K.cy) / K.fy * D, D], axis=-1).reshape(-1, 3)
    X2 = X @ pose.rotation.T + pose.translation
    u = np.round(K.fx * X2[:, 0] / X2[:, 2] + K.cx).astype(int)
    v = np.round(K.fy * X2[:, 1] / X2[:, 2] + K.cy).astype(int)
    ok = (X2[:, 2] > 0) & (u >= -w) & (u < 2 * w) & (v >= -h) & (v < 2 * h)
    zbuf = np.full((3 * h, 3 * w), np.inf)
    np.minimum.at(zbuf, (v[ok] + h, u[ok] + w), X2[ok, 2])
    # Query every view-1 pixel.
    gx1, gy1 = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    D1 = s.gt_depth.depth
    P = np.stack([(gx1 - K.cx) / K.fx * D1, (gy1 - K.cy) / K.fy * D1, D1], axis=-1)
    P2 = P @ pose.rotation.T + pose.translation
    u1 = K.fx * P2[..., 0] / P2[..., 2] + K.cx
    v1 = K.fy * P2[..., 1] / P2[..., 2] + K.cy
    iu, iv = np.round(u1).astype(int), np.round(v1).astype(int)
    nearest = zbuf[np.clip(iv + h, 0, 3 * h - 1), np.clip(iu + w, 0, 3 * w - 1)]
    occluded = nearest < P2[..., 2] * (1 - 1e-6)
    return occluded, u1


@pytest.mark.parametrize("tx", [0.5, -0.5])
def test_occlusion_mask_agrees_with_a_zbuffer(tx):
    spec = synthetic.SceneSpec(kind="two_planes", image_size=(160, 120), plane_depths=(3.0, 6.0),
                               pose=RigidTransform(np.eye(3), [tx, 0.0, 0.0]))
    s = synthetic.generate(spec)
    ref, u2 = _zbuffer_occlusion(s)
    got = s.occluded
    # Far-plane columns whose view-2 position is within a pixel of the occluding edge are ambiguous for the oracle.
    far = s.gt_depth.depth == 6.0
    edge_u = s.K.fx * (((spec.split * 160 - 0.5) - s.K.cx) / s.K.fx * 3.0 + tx) / 3.0 + s.K.cx
    clear = np.abs(u2 - edge_u) > 1.5
    assert np.array_equal(got[clear], ref[clear])
    assert not got[~far].any()
    if tx > 0:
        # Camera 2 sits to the left of camera 1, so the near (left) plane hides part of the far plane.
        assert got.sum() > 0
    else:
        assert got.sum() == 0


def test_point_clouds_have_no_raster():
    s = synthetic.generate(synthetic.SceneSpec(kind="point_cloud", n_points=10))
    assert s.image1 is None
    with pytest.raises(ValueError, match="no raster"):
        synthetic.render_second_view(s)


# ---------------------------------------------------------------- validation and export

@pytest.mark.parametrize("bad", [
    dict(kind="sphere"), dict(depth_range=(0.0, 1.0)), dict(depth_range=(3.0, 2.0)), dict(outlier_ratio=1.0),
    dict(noise_px=-1.0), dict(outlier_mode="gaussian"), dict(image_size=(1, 10)), dict(split=1.0),
    dict(kind="point_cloud", n_points=0), dict(flat_fraction=1.0),
])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        synthetic.SceneSpec(**bad)


def test_scene_behind_the_camera_is_an_error():
    with pytest.raises(DegenerateError):
        synthetic.generate(synthetic.SceneSpec(kind="textured_plane", plane_depth=5.0,
                                               pose=RigidTransform(np.eye(3), [0, 0, -10.0])))
    with pytest.raises(DegenerateError):
        synthetic.generate(synthetic.SceneSpec(kind="point_cloud", depth_range=(2, 4),
                                               pose=RigidTransform(np.eye(3), [0, 0, -10.0])))


def test_random_pose_properties():
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = synthetic.random_pose(rng, max_angle_deg=5.0, baseline=2.5, forward_bias=0.5)
        assert np.linalg.norm(p.translation) == pytest.approx(2.5)
        assert np.degrees(np.arccos(np.clip((np.trace(p.rotation) - 1) / 2, -1, 1))) <= 5.0 + 1e-9


def test_export_is_byte_identical_and_records_outliers(tmp_path):
    spec = synthetic.SceneSpec(kind="textured_plane", image_size=(64, 48), outlier_ratio=0.4, seed=9)
    synthetic.export_sample(synthetic.generate(spec), tmp_path / "a")
    synthetic.export_sample(synthetic.generate(spec), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"flow.flo", "gt_flow.flo", "depth.pfm", "image1.png", "image2.png", "manifest.txt",
            "intrinsics.txt", "pose.txt", "outliers.png", "covisible.png"} <= set(names)
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors
    manifest = read_metrics(tmp_path / "a" / "manifest.txt")
    assert float(manifest["outlier_ratio"]) == 0.4
    assert int(manifest["n_outliers"]) == round(0.4 * int(manifest["n_valid"]))
