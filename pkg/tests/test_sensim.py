import math

import numpy as np
import pytest

from motionprior import body, sensim
from motionprior.body import MotionSequence
from motionprior.exceptions import EmptyObservationError, InvalidArgumentError
from motionprior.sensim import (Camera, SensorClip, candidate_pixels, depth_to_pointcloud,
                                finite_difference_acceleration, generate_clip, lidar_sparsify, look_at,
                                render_depth, sample_camera, simulate_imu)

from test_body import smpl_asset

CAM = Camera(np.eye(3), np.zeros(3))


def quad(z0, half=1.0, tilt=0.0):
    """Two triangles spanning a square around the optical axis; z = z0 + tilt * x."""
    xy = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    verts = np.column_stack([xy, z0 + tilt * xy[:, 0]])
    return verts, np.array([[0, 1, 2], [0, 2, 3]])


def test_plane_depth_exact():
    v, f = quad(2.0)
    img = render_depth(v, f, CAM)
    assert img.hits.sum() > 1000
    assert np.abs(img.depth[img.hits] - 2.0).max() < 1e-6


def test_tilted_plane_depth_matches_ray_intersection():
    v, f = quad(2.0, tilt=0.5)
    img = render_depth(v, f, CAM)
    rows, cols = np.nonzero(img.hits)
    rx = (cols - CAM.cx) / CAM.fx
    # Ray (rx, ry, 1) * z meets the plane z = 2 + 0.5 x  ->  z = 2 / (1 - 0.5 rx)
    expected = 2.0 / (1.0 - 0.5 * rx)
    assert np.abs(img.depth[rows, cols] - expected).max() < 1e-6


def test_occlusion_nearest_wins():
    near_v, f = quad(2.0, half=0.3)
    far_v, _ = quad(3.0, half=1.0)
    for order in ((near_v, far_v), (far_v, near_v)):
        v = np.vstack(order)
        faces = np.vstack([f, f + 4])
        img = render_depth(v, faces, CAM)
        c = (int(CAM.cy), int(CAM.cx))
        assert img.depth[c] == pytest.approx(2.0, abs=1e-9)
        assert img.depth[c[0] - 120, c[1]] == pytest.approx(3.0, abs=1e-9)


def test_behind_camera_is_culled():
    v, f = quad(-2.0)
    assert not render_depth(v, f, CAM).hits.any()


def test_reprojection_within_half_pixel(toy_model):
    seq = MotionSequence(np.zeros((1, 24, 3)), np.zeros((1, 3)), np.zeros(10))
    cam = sample_camera(seq, np.random.default_rng(3), toy_model)
    verts = body.sequence_vertices(toy_model, seq)[0]
    img = render_depth(verts, toy_model.faces, cam)
    pc = depth_to_pointcloud(img, 1024, np.random.default_rng(0))
    uv = cam.project(cam.to_camera(pc.points))
    err = np.abs(uv[:, ::-1] - pc.pixels)
    assert err.max() < 0.5


def test_lidar_candidates_are_strided_subset(toy_model):
    seq = MotionSequence(np.zeros((1, 24, 3)), np.zeros((1, 3)), np.zeros(10))
    cam = sample_camera(seq, np.random.default_rng(0), toy_model)
    img = render_depth(body.sequence_vertices(toy_model, seq)[0], toy_model.faces, cam)
    full = set(zip(*candidate_pixels(img)))
    rows, cols = candidate_pixels(img, 5)
    assert set(zip(rows, cols)) <= full
    assert (rows % 5 == 0).all() and (cols % 5 == 0).all()
    assert len(rows) == sum(1 for r, c in full if r % 5 == 0 and c % 5 == 0)
    assert len(rows) <= 128 * 96
    pc = lidar_sparsify(img, 5, 256, np.random.default_rng(0))
    assert pc.points.shape == (256, 3)
    assert (pc.pixels % 5 == 0).all()


def test_sampling_replacement_rule():
    v, f = quad(2.0, half=0.01)
    img = render_depth(v, f, CAM)
    n_hits = img.hits.sum()
    assert 0 < n_hits < 64
    few = depth_to_pointcloud(img, 64, np.random.default_rng(0))
    assert len(few.points) == 64
    v, f = quad(2.0)
    many = depth_to_pointcloud(render_depth(v, f, CAM), 256, np.random.default_rng(0))
    assert len({tuple(p) for p in many.pixels}) == 256


def test_empty_image_raises():
    v, f = quad(-2.0)
    with pytest.raises(EmptyObservationError):
        depth_to_pointcloud(render_depth(v, f, CAM), 10)


def test_look_at_centres_target():
    target = np.array([0.3, 0.9, -0.2])
    cam = look_at([2.0, 1.2, 1.0], target)
    uv = cam.project(cam.to_camera(target[None]))[0]
    np.testing.assert_allclose(uv, [cam.cx, cam.cy], atol=1e-9)
    # Image rows grow downward in the world (y up).
    above = cam.project(cam.to_camera((target + [0, 0.1, 0])[None]))[0]
    assert above[1] < cam.cy


def test_sample_camera_geometry(toy_windows):
    seq = toy_windows[0]
    cam = sample_camera(seq, np.random.default_rng(5))
    t = math.ceil(len(seq) / 2) - 1
    target = seq.transl[t]
    assert cam.position[1] == pytest.approx(1.2)
    assert np.hypot(*(cam.position - target)[[0, 2]]) == pytest.approx(3.0)
    cam2 = sample_camera(seq, np.random.default_rng(5))
    np.testing.assert_array_equal(cam.rotation, cam2.rotation)


def test_camera_rejects_bad_rotation():
    with pytest.raises(InvalidArgumentError):
        Camera(np.eye(3) * 2, np.zeros(3))


def test_acceleration_quadratic_and_static():
    t = np.arange(10) / 10.0
    a = np.array([0.5, -1.0, 2.0])
    pos = 0.5 * a[None] * t[:, None] ** 2 + [1.0, 2.0, 3.0]
    np.testing.assert_allclose(finite_difference_acceleration(pos, 10.0), np.tile(a, (10, 1)), atol=1e-9)
    assert np.abs(finite_difference_acceleration(np.ones((5, 3)), 60.0)).max() == 0
    with pytest.raises(InvalidArgumentError):
        finite_difference_acceleration(np.ones((2, 3)), 10.0)


def test_imu_static_pose_and_orientation(toy_model, rng):
    theta = np.repeat(rng.normal(size=(1, 24, 3)) * 0.3, 6, 0)
    seq = MotionSequence(theta, np.zeros((6, 3)), np.zeros(10))
    acc, ori = simulate_imu(seq, toy_model)
    assert acc.shape == (6, 6, 3) and ori.shape == (6, 6, 3, 3)
    assert np.abs(acc).max() < 1e-9
    _, grots = body.sequence_joints(toy_model, seq)
    dominant = toy_model.skin_weights[list(toy_model.imu_vertices)].argmax(1)
    np.testing.assert_allclose(ori, grots[:, dominant], atol=1e-12)


def test_imu_translation_acceleration(toy_model):
    t = np.arange(8) / 10.0
    transl = np.column_stack([0.5 * 3.0 * t ** 2, np.zeros(8), np.zeros(8)])
    seq = MotionSequence(np.zeros((8, 24, 3)), transl, np.zeros(10))
    acc, _ = simulate_imu(seq, toy_model)
    np.testing.assert_allclose(acc, np.broadcast_to([3.0, 0, 0], acc.shape), atol=1e-9)
    rel, _ = simulate_imu(seq, toy_model, root_relative=True)
    assert np.abs(rel).max() < 1e-9


def test_smpl_imu_vertices(tmp_path):
    path, _ = smpl_asset(tmp_path)
    m = body.load_model(path)
    assert m.imu_vertices == (1962, 5431, 1096, 4583, 412, 3021)
    seq = MotionSequence(np.zeros((3, 24, 3)), np.zeros((3, 3)), np.zeros(10))
    acc, _ = simulate_imu(seq, m)
    assert acc.shape == (3, 6, 3)


@pytest.mark.parametrize("modality, shape", [("depth_pc", (5, 1024, 3)), ("lidar", (5, 256, 3))])
def test_generate_clip_deterministic(toy_model, toy_windows, modality, shape, tmp_path):
    seq = toy_windows[2].slice(0, 5)
    a = generate_clip(seq, modality, toy_model, seed=4)
    b = generate_clip(seq, modality, toy_model, seed=4)
    assert a.points.shape == shape
    np.testing.assert_array_equal(a.points, b.points)
    a.save(tmp_path / "c.npz", header={"seed": 4})
    back = SensorClip.load(tmp_path / "c.npz")
    np.testing.assert_array_equal(back.points, a.points.astype("<f4"))
    assert back.meta["provenance"] == {"seed": 4}
    np.testing.assert_allclose(back.camera.rotation, a.camera.rotation)


def test_imu_clip_features(toy_model, toy_windows):
    clip = generate_clip(toy_windows[0], "imu", toy_model)
    feats = clip.imu_features()
    assert feats.shape == (40, 72)
    np.testing.assert_array_equal(feats[:, :3], clip.acc[:, 0])
    np.testing.assert_array_equal(feats[:, 3:12], clip.ori[:, 0].reshape(40, 9))


def test_unknown_modality(toy_model, toy_windows):
    with pytest.raises(InvalidArgumentError):
        generate_clip(toy_windows[0], "radar", toy_model)


def test_fill_invalid_uses_nearest():
    frames = [None, np.ones(2), None, None, np.full(2, 5.0)]
    flags = np.array([True, False, True, True, False])
    out = sensim._fill_invalid(frames, flags)
    assert [f[0] for f in out] == [1, 1, 1, 5, 5]
