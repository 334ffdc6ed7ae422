"""Analytic ground-truth scene: ray-cast outputs against closed-form hits."""

import numpy as np
import pytest

from layersplat.config import SCENE_RADIUS
from layersplat.geometry import Pose, look_at_rotation, quat_to_rotmat
from layersplat.scene_io import MASK_BACK, MASK_FRONT
from layersplat.synth import (PlaneBoxesScene, default_intrinsics, ring_poses)


@pytest.fixture(scope="module")
def scene():
    return PlaneBoxesScene()


@pytest.fixture(scope="module")
def camera():
    intr = default_intrinsics(width=64, height=48)
    pose = ring_poses(1)[0]
    return intr, pose


def test_render_shapes_and_ranges(scene, camera):
    intr, pose = camera
    out = scene.render(intr, pose)
    h, w = intr.height, intr.width
    assert out["image"].shape == (h, w, 3)
    assert out["depth"].shape == (h, w)
    assert out["normal_cam"].shape == (h, w, 3)
    assert out["mask"].shape == (h, w)
    assert out["image"].min() >= 0.0 and out["image"].max() <= 1.0
    assert (out["depth"] > 0).all() and np.isfinite(out["depth"]).all()
    assert set(np.unique(out["mask"])) <= {MASK_FRONT, MASK_BACK}


def test_normals_unit_and_camera_facing(scene, camera):
    intr, pose = camera
    out = scene.render(intr, pose)
    n = out["normal_cam"].reshape(-1, 3)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    dirs = intr.pixel_ray_dirs().reshape(-1, 3)
    assert ((n * dirs).sum(axis=1) <= 1e-12).all()


def test_straight_down_ray_hits_ground_plane(scene):
    # camera directly above the origin between the boxes: the central ray
    # travels exactly the camera height before hitting z=0
    center = np.array([0.0, -0.9, 4.0])
    pose = Pose(quat=look_at_rotation(center, np.array([0.0, -0.9, 0.0])),
                center=center)
    intr = default_intrinsics(width=33, height=33, focal=40.0)
    out = scene.render(intr, pose)
    assert out["depth"][16, 16] == pytest.approx(4.0, abs=1e-9)
    assert out["normal_cam"][16, 16] @ np.array([0, 0, -1]) == pytest.approx(
        1.0, abs=1e-9)


def test_front_mask_matches_unprojected_radius(scene, camera):
    intr, pose = camera
    out = scene.render(intr, pose)
    dirs = intr.pixel_ray_dirs().reshape(-1, 3) @ pose.rotation.T
    pts = pose.center[None, :] + out["depth"].reshape(-1, 1) * dirs
    inside = np.linalg.norm(pts, axis=1) <= scene.front_radius
    recomputed = np.where(inside, MASK_FRONT, MASK_BACK)
    np.testing.assert_array_equal(recomputed.reshape(out["mask"].shape),
                                  out["mask"])
    assert (out["mask"] == MASK_FRONT).any() and (out["mask"] == MASK_BACK).any()


def test_ring_poses_on_scene_radius_looking_at_target(scene):
    poses = ring_poses(6, height=0.6)
    assert len(poses) == 6
    for p in poses:
        assert np.linalg.norm(p.center) == pytest.approx(SCENE_RADIUS, abs=1e-12)
        fwd = quat_to_rotmat(p.quat)[:, 2]
        to_target = np.array([0.0, 0.0, 0.25]) - p.center
        to_target /= np.linalg.norm(to_target)
        np.testing.assert_allclose(fwd, to_target, atol=1e-12)


def test_point_cloud_sampling_lies_on_surfaces_when_noiseless(scene):
    intr = default_intrinsics(width=32, height=24)
    views = [(intr, p) for p in ring_poses(2)]
    rng = np.random.default_rng(0)
    cloud = scene.sample_point_cloud(views, noise=0.0, rng=rng, stride=2)
    assert cloud.n == 2 * (24 // 2) * (32 // 2)
    assert (cloud.confidence == 1.0).all()
    # re-tracing from the first camera toward its samples hits them exactly
    d0, _, _ = scene._trace(views[0][1].center,
                            _unit(cloud.positions[: cloud.n // 2] - views[0][1].center))
    travelled = np.linalg.norm(cloud.positions[: cloud.n // 2] - views[0][1].center,
                               axis=1)
    np.testing.assert_allclose(d0, travelled, atol=1e-9)


def test_noisy_cloud_confidence_decreases_with_offset(scene):
    intr = default_intrinsics(width=32, height=24)
    views = [(intr, ring_poses(1)[0])]
    cloud = scene.sample_point_cloud(views, noise=0.02,
                                     rng=np.random.default_rng(3), stride=4)
    assert cloud.confidence.min() >= 0.05 and cloud.confidence.max() <= 1.0
    assert cloud.confidence.std() > 0


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)
