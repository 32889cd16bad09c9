import math
import shutil

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES, KITTI3_SPEC
from jetpose import data
from jetpose.errors import DatasetError
from jetpose.geometry import CameraIntrinsics, RansacConfig, estimate_pose_ransac, fundamental_from_pose
from jetpose.img import load_image, sample_bilinear_many
from jetpose.metrics import rotation_error, translation_error


def test_calib_fixture_reads_p0_exactly():
    K = data.read_calib(FIXTURES / "kitti00_calib.txt")
    assert (K.fx, K.fy, K.cx, K.cy) == (718.856, 718.856, 607.1928, 185.2157)


def test_calib_errors(tmp_path):
    with pytest.raises(DatasetError):
        data.read_calib(tmp_path / "calib.txt")
    bad = tmp_path / "bad.txt"
    bad.write_text("P0: 1 2 3\n")
    with pytest.raises(DatasetError):
        data.read_calib(bad)
    bad.write_text("P1: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(DatasetError):
        data.read_calib(bad)
    bad.write_text("P0: 1 0 0 0 0 x 0 0 0 0 1 0\n")
    with pytest.raises(DatasetError):
        data.read_calib(bad)


def test_identity_pose_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 0\n")
    T = data.read_poses(p)
    assert np.array_equal(T[0], np.eye(4))
    R, t = data.pose_b_from_a(T[0], T[1])
    assert rotation_error(np.eye(3), R) == 0
    assert np.linalg.norm(t) == 0


def test_kitti3_fixture_relative_transforms(kitti3):
    seq = data.load_kitti_sequence(kitti3, require_poses=True)
    assert seq.frame_count == 3
    K = seq.intrinsics
    assert (K.fx, K.fy, K.cx, K.cy) == (180.0, 180.0, 119.5, 79.5)
    step = np.eye(4)
    step[2, 3] = 0.5
    for i in range(2):
        assert np.array_equal(seq.relative_transform(i), step)
        R, t = seq.relative_pose(i)
        assert np.array_equal(R, np.eye(3)) and np.allclose(t, [0, 0, -0.5])
    assert seq.frame(0).width == 240 and seq.frame(2).height == 160


def test_kitti3_fixture_matches_its_scene(kitti3):
    """The shipped frames are exactly what the documented scene spec renders."""
    scene = data.build_scene(KITTI3_SPEC)
    for i in range(3):
        R, T = data.sequence_motion(scene, i)
        expected = data.render_view(scene, scene.K, R, T, noise_seed=[scene.seed, 100 + i])
        assert load_image(kitti3 / "image_0" / f"{i:06d}.png") == expected


def test_kitti_loader_errors(kitti3, tmp_path):
    with pytest.raises(DatasetError):
        data.load_kitti_sequence(tmp_path / "nope")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DatasetError):
        data.load_kitti_sequence(empty)
    (kitti3 / "poses.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(DatasetError):
        data.load_kitti_sequence(kitti3)
    (kitti3 / "poses.txt").unlink()
    assert data.load_kitti_sequence(kitti3).gt_poses is None
    with pytest.raises(DatasetError):
        data.load_kitti_sequence(kitti3, require_poses=True)
    shutil.move(kitti3 / "image_0" / "000001.png", kitti3 / "image_0" / "000007.png")
    with pytest.raises(DatasetError):
        data.load_kitti_sequence(kitti3)
    (kitti3 / "calib.txt").unlink()
    with pytest.raises(DatasetError):
        data.load_kitti_sequence(kitti3)


def test_scene_spec_round_trip():
    spec = data.standard_scene_spec(4)
    text = data.format_scene_spec(spec)
    assert data.parse_scene_spec(text) == spec
    parsed = data.parse_scene_spec("# comment\nseed = 3\nrot_axis = 0 0 1\nt_dir=1,0,0  # sideways\nt_scale=0.1\n")
    assert parsed.seed == 3 and parsed.rot_axis == (0, 0, 1) and parsed.t_scale == 0.1


@pytest.mark.parametrize("text", ["colour=red", "seed", "rot_axis=1,0", "width=20",
                                  "plane2_d=4", "frames=1", "seed=abc"])
def test_scene_spec_rejects(text):
    with pytest.raises(ValueError):
        data.parse_scene_spec(text)


def test_plane_behind_camera():
    spec = data.SceneSpec(plane_normal=(1.0, 0.0, 0.1), plane_d=1.0)
    with pytest.raises(ValueError, match="plane-behind-camera"):
        data.build_scene(spec)


def test_identity_scene_renders_identical_views():
    scene = data.build_scene(data.SceneSpec(seed=2, width=120, height=90))
    A, B, H = data.synth_render(scene)
    assert A == B
    assert np.allclose(H, np.eye(3))


def test_z_rotation_homography_rotates_about_principal_point():
    theta = math.radians(4)
    spec = data.SceneSpec(width=200, height=160, focal=150.0, rot_axis=(0, 0, 1), rot_deg=4.0)
    scene = data.build_scene(spec)
    _, _, H = data.synth_render(scene)
    c = np.array([scene.K.cx, scene.K.cy])
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    for corner in [(0, 0), (199, 0), (0, 159), (199, 159)]:
        p = H @ [*corner, 1.0]
        assert np.allclose(p[:2] / p[2], c + rot @ (np.array(corner) - c), atol=1e-9)


@given(st.integers(0, 50))
def test_mapped_points_satisfy_epipolar_constraint(seed):
    scene = data.build_scene(data.standard_scene_spec(seed))
    rng = np.random.default_rng(seed)
    xs = rng.uniform((0, 0), (scene.width - 1, scene.height - 1), (200, 2))
    ys = data.map_points(scene, scene.K, xs)
    F = fundamental_from_pose(scene.K, scene.relative_pose).m
    r = np.einsum("ki,ij,kj->k", np.c_[ys, np.ones(200)], F, np.c_[xs, np.ones(200)])
    assert np.max(np.abs(r)) < 1e-9


def test_render_agrees_with_homography():
    # away from the plane seam, image B sampled at H x reproduces image A at x
    spec = data.SceneSpec(seed=3, width=160, height=120, focal=150.0, rot_axis=(0, 1, 0), rot_deg=2.0,
                          t_dir=(1, 0, 0), t_scale=0.2)
    scene = data.build_scene(spec)
    A, B, _ = data.synth_render(scene)
    xs = np.array([(u, v) for u in range(30, 130, 7) for v in range(30, 90, 7)], dtype=float)
    ys = data.map_points(scene, scene.K, xs)
    diff = sample_bilinear_many(B, ys[:, 0], ys[:, 1]) - A.data[xs[:, 1].astype(int), xs[:, 0].astype(int)]
    assert np.median(np.abs(diff)) < 3


def test_correspondences_noise_free_and_outliers():
    scene = data.build_scene(data.standard_scene_spec(1))
    corrs, out = data.synth_correspondences(scene, n=100)
    F = fundamental_from_pose(scene.K, scene.relative_pose).m
    r = [np.array([*c.y, 1]) @ F @ np.array([*c.x, 1]) for c in corrs]
    assert np.max(np.abs(r)) < 1e-9 and not out.any()
    corrs, out = data.synth_correspondences(scene, n=100, outlier_fraction=0.3)
    assert out.sum() == 30 and len(corrs) == 100
    again, _ = data.synth_correspondences(scene, n=100, outlier_fraction=0.3)
    assert all(np.array_equal(a.y, b.y) for a, b in zip(corrs, again))
    with pytest.raises(ValueError):
        data.synth_correspondences(scene, n=7)


def test_pixel_noise_rms_matches_model():
    # isotropic noise of std s moves a point off its epipolar line by N(0, s^2)
    rms = []
    for seed in range(10):
        scene = data.build_scene(data.standard_scene_spec(seed))
        corrs, _ = data.synth_correspondences(scene, n=200, pixel_noise=1.0, seed=[seed, 1])
        F = fundamental_from_pose(scene.K, scene.relative_pose).m
        for c in corrs:
            line = F @ [*c.x, 1]
            rms.append((line @ [*c.y, 1]) / math.hypot(line[0], line[1]))
    assert np.sqrt(np.mean(np.square(rms))) == pytest.approx(1.0, rel=0.2)


def test_two_plane_round_trip():
    scene = data.build_scene(data.standard_scene_spec(6))
    corrs, _ = data.synth_correspondences(scene, n=200)
    est, mask = estimate_pose_ransac(corrs, scene.K, RansacConfig(seed=0))
    gt = scene.relative_pose
    assert rotation_error(gt.rotation, est.rotation) < 0.01
    assert translation_error(gt.translation_dir, est.translation_dir) < 0.1


def test_gt_pose_and_intrinsics_files(tmp_path):
    R = np.eye(3)
    data.write_gt_pose(tmp_path / "gt.txt", R, (0.6, 0, 0.8), 0.25)
    R2, t2, s2 = data.read_gt_pose(tmp_path / "gt.txt")
    assert np.array_equal(R2, R) and np.array_equal(t2, [0.6, 0, 0.8]) and s2 == 0.25
    K = CameraIntrinsics(100.5, 101.25, 50.0, 40.0)
    data.write_intrinsics(tmp_path / "K.txt", K)
    assert data.read_intrinsics(tmp_path / "K.txt") == K
    (tmp_path / "gt.txt").write_text("1 0 0\n")
    with pytest.raises(DatasetError):
        data.read_gt_pose(tmp_path / "gt.txt")


def test_written_sequence_poses_are_consistent(tmp_path):
    scene = data.build_scene(data.standard_scene_spec(2, 160, 120))
    data.write_kitti_sequence(scene, tmp_path, 3)
    seq = data.load_kitti_sequence(tmp_path, require_poses=True)
    for i in range(2):
        R, t = seq.relative_pose(i)
        assert rotation_error(scene.rotation, R) < 1e-9
        assert np.allclose(t, scene.translation, atol=1e-9)
