import filecmp
import os
import subprocess
import sys

import numpy as np
import pytest

from twoview import flow_io, synthetic
from twoview.cli import read_config, run
from twoview.data import DepthMap, FlowField
from twoview.geometry import RigidTransform, rotation_about
from twoview.metrics import pose_errors


def _synth(out, *args):
    assert run(["synth", "--out", str(out), *args]) == 0
    return out


def _pipeline_args(s, out, *extra):
    return ["pipeline", "--flow", str(s / "flow.flo"), "--image1", str(s / "image1.png"),
            "--image2", str(s / "image2.png"), "--intrinsics", str(s / "intrinsics.txt"),
            "--out", str(out), *extra]


def _same_tree(a, b):
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors


# ---------------------------------------------------------------- synth

def test_synth_is_byte_identical_across_runs(tmp_path):
    _synth(tmp_path / "a", "--seed", "5", "--width", "64", "--height", "48")
    _synth(tmp_path / "b", "--seed", "5", "--width", "64", "--height", "48")
    assert _same_tree(tmp_path / "a", tmp_path / "b")


def test_synth_manifest_records_outliers(tmp_path):
    _synth(tmp_path / "s", "--outlier-ratio", "0.4", "--width", "64", "--height", "48")
    m = read_config(tmp_path / "s" / "manifest.txt")
    assert float(m["outlier_ratio"]) == 0.4
    assert int(m["n_outliers"]) == round(0.4 * int(m["n_valid"]))


def test_synth_rejects_invalid_spec(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path), "--outlier-ratio", "1.5"]) == 1
    assert "outlier_ratio" in capsys.readouterr().err
    assert run(["synth", "--out", str(tmp_path), "--plane-depths", "3"]) == 1


# ---------------------------------------------------------------- estimate-pose

def test_estimate_pose_end_to_end(tmp_path):
    s = _synth(tmp_path / "s", "--kind", "point_cloud", "--n-points", "300", "--seed", "2")
    assert run(["estimate-pose", "--flow", str(s / "flow.flo"), "--intrinsics", str(s / "intrinsics.txt"),
                "--out", str(tmp_path / "p")]) == 0
    est = flow_io.read_trajectory(tmp_path / "p" / "pose.txt").poses[0]
    gt = flow_io.parse_pose_line(read_config(s / "manifest.txt")["pose"])
    e = pose_errors(est, gt)
    assert e.rot_deg < 0.01 and e.tran_deg < 0.01
    assert np.linalg.norm(est.translation) == pytest.approx(1.0, abs=1e-12)
    stats = flow_io.read_metrics(tmp_path / "p" / "pose_stats.txt")
    assert int(stats["n_inliers"]) == 300 and int(stats["low_parallax"]) == 0
    assert (tmp_path / "p" / "report.txt").exists()


def test_estimate_pose_missing_flow_is_exit_1(tmp_path, capsys):
    K = tmp_path / "K.txt"
    flow_io.write_intrinsics(K, synthetic.default_intrinsics())
    assert run(["estimate-pose", "--flow", str(tmp_path / "nope.flo"), "--intrinsics", str(K),
                "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_estimate_pose_zero_motion_is_exit_2(tmp_path, capsys):
    flow_io.write_flow(tmp_path / "zero.flo", FlowField.zeros(30, 40))
    flow_io.write_intrinsics(tmp_path / "K.txt", synthetic.default_intrinsics(40, 30))
    assert run(["estimate-pose", "--flow", str(tmp_path / "zero.flo"), "--intrinsics", str(tmp_path / "K.txt"),
                "--out", str(tmp_path / "o")]) == 2
    assert "degenerate" in capsys.readouterr().err


def test_keypoint_mask_needs_an_image(tmp_path, capsys):
    s = _synth(tmp_path / "s", "--width", "64", "--height", "48")
    assert run(["estimate-pose", "--flow", str(s / "flow.flo"), "--intrinsics", str(s / "intrinsics.txt"),
                "--mask", "keypoints", "--out", str(tmp_path / "o")]) == 1
    assert "--image1" in capsys.readouterr().err


# ---------------------------------------------------------------- sweep-depth

def _sweep(tmp_path, s, name, *extra):
    out = tmp_path / name
    rc = run(["sweep-depth", "--image1", str(s / "image1.png"), "--image2", str(s / "image2.png"),
              "--intrinsics", str(s / "intrinsics.txt"), "--pose", str(s / "pose.txt"),
              "--gt-depth", str(s / "depth.pfm"), "--eval-mask", str(s / "covisible.png"),
              "--dmin", "2", "--out", str(out), *extra])
    assert rc == 0
    return flow_io.read_metrics(out / "sweep_stats.txt"), out


def test_sweep_depth_is_within_the_quantization_bound_and_soft_helps(tmp_path):
    s = _synth(tmp_path / "s", "--width", "160", "--height", "120")
    hard, out = _sweep(tmp_path, s, "hard", "--mode", "hard", "--gt-scale", "0.5")
    soft, _ = _sweep(tmp_path, s, "soft", "--mode", "soft")
    assert float(hard["abs_rel"]) <= float(hard["quantization_bound"])
    assert float(soft["abs_rel"]) <= float(hard["abs_rel"])
    assert "quantization_bound" in (out / "report.txt").read_text()
    metric = flow_io.read_depth(out / "depth_metric.pfm")
    rel = flow_io.read_depth(out / "depth.pfm")
    assert np.allclose(metric.depth[rel.valid], 0.5 * rel.depth[rel.valid])
    assert flow_io.read_pfm(out / "confidence.pfm").shape == (120, 160)


def test_sweep_depth_on_flat_images_warns(tmp_path, capsys):
    img = np.full((40, 50), 0.5)
    flow_io.write_image(tmp_path / "a.png", img)
    flow_io.write_intrinsics(tmp_path / "K.txt", synthetic.default_intrinsics(50, 40))
    flow_io.write_trajectory(tmp_path / "pose.txt", [RigidTransform(np.eye(3), [1, 0, 0])])
    assert run(["sweep-depth", "--image1", str(tmp_path / "a.png"), "--image2", str(tmp_path / "a.png"),
                "--intrinsics", str(tmp_path / "K.txt"), "--pose", str(tmp_path / "pose.txt"),
                "--hypotheses", "8", "--out", str(tmp_path / "o")]) == 0
    assert "warning" in capsys.readouterr().err
    assert float(flow_io.read_metrics(tmp_path / "o" / "sweep_stats.txt")["mean_confidence"]) < 0.05


def test_sweep_depth_without_pose_or_flow_is_exit_1(tmp_path, capsys):
    s = _synth(tmp_path / "s", "--width", "64", "--height", "48")
    assert run(["sweep-depth", "--image1", str(s / "image1.png"), "--image2", str(s / "image2.png"),
                "--intrinsics", str(s / "intrinsics.txt"), "--out", str(tmp_path / "o")]) == 1
    assert "--pose or --flow" in capsys.readouterr().err


def test_sweep_depth_can_estimate_its_own_pose(tmp_path):
    s = _synth(tmp_path / "s", "--kind", "two_planes", "--width", "96", "--height", "72")
    assert run(["sweep-depth", "--image1", str(s / "image1.png"), "--image2", str(s / "image2.png"),
                "--intrinsics", str(s / "intrinsics.txt"), "--flow", str(s / "flow.flo"),
                "--hypotheses", "16", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "pose.txt").exists() and (tmp_path / "o" / "depth.pfm").exists()


# ---------------------------------------------------------------- evaluate

def test_evaluate_depth_perfect(tmp_path):
    d = DepthMap(np.random.default_rng(0).uniform(1, 50, (12, 16)))
    flow_io.write_depth(tmp_path / "d.pfm", d)
    flow_io.write_intrinsics(tmp_path / "K.txt", synthetic.default_intrinsics(16, 12))
    assert run(["evaluate", "depth", "--pred", str(tmp_path / "d.pfm"), "--gt", str(tmp_path / "d.pfm"),
                "--intrinsics", str(tmp_path / "K.txt"), "--out", str(tmp_path / "o")]) == 0
    m = {k: float(v) for k, v in flow_io.read_metrics(tmp_path / "o" / "metrics.txt").items()}
    assert set(m) == {"abs_rel", "sq_rel", "rmse", "rmse_log", "d1_all", "delta1", "delta2", "delta3",
                      "l1_inv", "sc_inv", "l1_rel"}
    for k, v in m.items():
        assert v == (1.0 if k.startswith("delta") else 0.0), k


def test_evaluate_depth_size_mismatch_is_exit_1(tmp_path, capsys):
    flow_io.write_depth(tmp_path / "a.pfm", DepthMap(np.ones((4, 5))))
    flow_io.write_depth(tmp_path / "b.pfm", DepthMap(np.ones((5, 4))))
    assert run(["evaluate", "depth", "--pred", str(tmp_path / "a.pfm"), "--gt", str(tmp_path / "b.pfm"),
                "--out", str(tmp_path / "o")]) == 1
    assert "shape mismatch" in capsys.readouterr().err


def test_evaluate_pose(tmp_path):
    flow_io.write_trajectory(tmp_path / "a.txt", [RigidTransform(rotation_about([0, 0, 1], np.pi / 2), [1, 0, 0])])
    flow_io.write_trajectory(tmp_path / "b.txt", [RigidTransform(np.eye(3), [-2, 0, 0])])
    assert run(["evaluate", "pose", "--pred", str(tmp_path / "a.txt"), "--gt", str(tmp_path / "b.txt"),
                "--out", str(tmp_path / "o")]) == 0
    m = flow_io.read_metrics(tmp_path / "o" / "metrics.txt")
    assert float(m["rot_deg"]) == pytest.approx(90.0) and float(m["tran_deg"]) == pytest.approx(180.0)


def test_evaluate_trajectory_recovers_drift(tmp_path):
    n = 1601
    s = np.arange(n) * 10.0
    P = np.column_stack([50 * np.sin(s / 2000), np.zeros(n), s])
    heading = np.arctan2(np.gradient(P[:, 0]), np.gradient(P[:, 2]))
    rots = [rotation_about([0, 1, 0], h) for h in heading]
    factor = np.where(np.arange(n - 1) < n // 2, 1.01, 0.99)
    Q = np.vstack([P[:1], P[:1] + np.cumsum(np.diff(P, axis=0) * factor[:, None], axis=0)])
    flow_io.write_trajectory(tmp_path / "gt.txt", [RigidTransform(R, p) for R, p in zip(rots, P)])
    flow_io.write_trajectory(tmp_path / "pred.txt", [RigidTransform(R, q) for R, q in zip(rots, Q)])
    assert run(["evaluate", "trajectory", "--pred", str(tmp_path / "pred.txt"), "--gt", str(tmp_path / "gt.txt"),
                "--out", str(tmp_path / "o")]) == 0
    m = flow_io.read_metrics(tmp_path / "o" / "metrics.txt")
    assert float(m["t_err_pct"]) == pytest.approx(1.0, abs=0.1)


def test_evaluate_short_trajectory_is_exit_1(tmp_path, capsys):
    poses = [RigidTransform(np.eye(3), [i, 0, 0]) for i in range(5)]
    flow_io.write_trajectory(tmp_path / "t.txt", poses)
    assert run(["evaluate", "trajectory", "--pred", str(tmp_path / "t.txt"), "--gt", str(tmp_path / "t.txt"),
                "--out", str(tmp_path / "o")]) == 1
    assert "insufficient length" in capsys.readouterr().err


# ---------------------------------------------------------------- pipeline

def test_pipeline_noiseless_end_to_end(tmp_path):
    s = _synth(tmp_path / "s", "--kind", "two_planes", "--width", "160", "--height", "120", "--pose", "random",
               "--max-rotation-deg", "5", "--seed", "1", "--texture-seed", "1")
    out = tmp_path / "p"
    assert run(_pipeline_args(s, out, "--gt-pose", str(s / "pose.txt"), "--gt-depth", str(s / "depth.pfm"),
                              "--eval-mask", str(s / "covisible.png"), "--scaling", "gt", "--gt-scale", "0.5",
                              "--dmin", "2")) == 0
    m = flow_io.read_metrics(out / "metrics.txt")
    assert float(m["rot_deg"]) < 0.01
    gt = flow_io.read_depth(s / "depth.pfm").depth
    bound = (int(64) * 2.0) ** -1 * (gt[flow_io.read_mask(s / "covisible.png").mask] / 0.5).max()
    assert float(m["abs_rel"]) <= bound
    for name in ("manifest.txt", "pose.txt", "depth.pfm", "confidence.pfm", "stats.txt", "report.txt"):
        assert (out / name).exists(), name


def test_pipeline_with_outliers_monte_carlo(tmp_path):
    failures = 0
    for seed in range(100):
        s = _synth(tmp_path / f"s{seed}", "--kind", "two_planes", "--width", "160", "--height", "120",
                   "--pose", "random", "--max-rotation-deg", "5", "--noise", "1", "--outlier-ratio", "0.4",
                   "--seed", str(seed), "--texture-seed", str(seed))
        out = tmp_path / f"p{seed}"
        rc = run(_pipeline_args(s, out, "--gt-pose", str(s / "pose.txt"), "--ransac-threshold", "2",
                                "--hypotheses", "16", "--seed", str(seed)))
        if rc != 0 or float(flow_io.read_metrics(out / "metrics.txt")["rot_deg"]) >= 1.0:
            failures += 1
    assert failures <= 5


def test_pipeline_rerun_from_manifest_is_identical(tmp_path):
    s = _synth(tmp_path / "s", "--kind", "two_planes", "--width", "96", "--height", "72", "--noise", "0.5",
               "--outlier-ratio", "0.2")
    assert run(_pipeline_args(s, tmp_path / "a", "--seed", "4", "--mode", "soft", "--hypotheses", "24")) == 0
    assert run(["pipeline", "--config", str(tmp_path / "a" / "manifest.txt"), "--threads", "3",
                "--out", str(tmp_path / "b")]) == 0
    assert _same_tree(tmp_path / "a", tmp_path / "b")


def test_pipeline_errors_name_the_stage(tmp_path, capsys):
    s = _synth(tmp_path / "s", "--width", "40", "--height", "30")
    flow_io.write_flow(tmp_path / "zero.flo", FlowField.zeros(30, 40))
    args = _pipeline_args(s, tmp_path / "o")
    args[2] = str(tmp_path / "zero.flo")
    assert run(args) == 2
    err = capsys.readouterr().err
    assert "pose:" in err and "degenerate" in err
    args = _pipeline_args(s, tmp_path / "o2")
    args[6] = str(tmp_path / "missing.png")
    assert run(args) == 1
    assert "sweep:" in capsys.readouterr().err


# ---------------------------------------------------------------- config handling

def test_command_line_overrides_config(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# synthetic scene\nkind=point_cloud\nn-points=50\nwidth=64\nheight=48\n")
    _synth(tmp_path / "s", "--config", str(cfg), "--n-points", "70")
    m = read_config(tmp_path / "s" / "manifest.txt")
    assert m["kind"] == "point_cloud" and int(m["n_valid"]) == 70


@pytest.mark.parametrize("text, message", [
    ("colour=red\n", "unknown config keys"),
    ("width=wide\n", "bad value"),
    ("no equals sign\n", "expected key=value"),
    ("command=pipeline\n", "written for 'pipeline'"),
])
def test_bad_configs_are_exit_1(tmp_path, capsys, text, message):
    cfg = tmp_path / "c.txt"
    cfg.write_text(text)
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert message in capsys.readouterr().err


def test_missing_out_and_required_options(tmp_path, capsys):
    assert run(["synth"]) == 1
    assert "--out" in capsys.readouterr().err
    assert run(["estimate-pose", "--out", str(tmp_path)]) == 1
    assert "--flow" in capsys.readouterr().err


def test_commands_write_only_inside_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    s = _synth(tmp_path / "s", "--kind", "two_planes", "--width", "64", "--height", "48")
    before = set(os.listdir(tmp_path))
    assert run(_pipeline_args(s, tmp_path / "p", "--hypotheses", "8")) == 0
    assert set(os.listdir(tmp_path)) - before == {"p"}


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "twoview.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "pipeline" in r.stdout
    assert subprocess.run([sys.executable, "-m", "twoview.cli", "estimate-pose", "--out", "/dev/null/x"],
                          capture_output=True).returncode == 1
