"""Front/back partitioning, visibility masks, and sphere inpainting."""

import numpy as np
import pytest

from layersplat.geometry import BoundingSphere, Pose
from layersplat.layering import (LayerPartition, inpaint_back_depth,
                                 partition_by_depth_threshold,
                                 partition_by_sphere, render_visibility_mask)
from layersplat.scene_io import (MASK_BACK, MASK_FRONT, MASK_UNKNOWN,
                                 PointCloud)

from conftest import identity_pose, tiny_intrinsics


def cloud_of(positions, seed=0):
    positions = np.asarray(positions, dtype=float)
    rng = np.random.default_rng(seed)
    return PointCloud(positions=positions,
                      colors=rng.uniform(0, 1, positions.shape),
                      confidence=np.ones(len(positions)))


def test_sphere_partition_matches_distance_oracle():
    rng = np.random.default_rng(1)
    cloud = cloud_of(rng.normal(0, 2.0, (300, 3)))
    sphere = BoundingSphere(center=np.array([0.3, -0.2, 0.5]), radius=1.7)
    part = partition_by_sphere(cloud, sphere)
    d = np.linalg.norm(cloud.positions - sphere.center, axis=1)
    np.testing.assert_array_equal(part.front_idx, np.flatnonzero(d <= 1.7))
    np.testing.assert_array_equal(part.back_idx, np.flatnonzero(d > 1.7))
    assert part.front.n + part.back.n == cloud.n
    assert part.method == "sphere" and part.sphere is sphere
    np.testing.assert_array_equal(part.front.positions,
                                  cloud.positions[part.front_idx])


def test_sphere_partition_empty_side_is_none():
    cloud = cloud_of([[0.0, 0.0, 0.2], [0.1, 0.0, 0.1]])
    big = partition_by_sphere(cloud, BoundingSphere(np.zeros(3), 10.0))
    assert big.back is None and big.front.n == 2
    tiny = partition_by_sphere(cloud, BoundingSphere(np.zeros(3), 1e-6))
    assert tiny.front is None and tiny.back.n == 2


def test_partition_validation():
    cloud = cloud_of([[0, 0, 1.0]])
    with pytest.raises(ValueError):
        LayerPartition(front=cloud, back=None, front_idx=np.array([0]),
                       back_idx=np.array([]), method="magic")
    with pytest.raises(ValueError):
        LayerPartition(front=cloud, back=None, front_idx=np.array([0]),
                       back_idx=np.array([]), method="sphere", sphere=None)
    with pytest.raises(ValueError):
        LayerPartition(front=cloud, back=cloud, front_idx=np.array([0]),
                       back_idx=np.array([0]), method="depth-threshold")


def test_depth_threshold_partition_uses_prior_depth_at_projection():
    intr = tiny_intrinsics()  # 16x16, fx=20, cx=cy=8
    pose = identity_pose()
    depth = np.full((16, 16), 5.0)
    depth[:, :8] = 1.0  # left half of the image is "near"
    pts = [
        [-0.1, 0.0, 1.0],   # projects to column 6 -> near -> front
        [0.1, 0.0, 1.0],    # column 10 -> far -> back
        [0.0, 0.0, -1.0],   # behind the camera -> back
        [5.0, 0.0, 1.0],    # projects outside the image -> back
    ]
    part = partition_by_depth_threshold(cloud_of(pts), [(intr, pose)],
                                        [depth], [2.0])
    np.testing.assert_array_equal(part.front_idx, [0])
    np.testing.assert_array_equal(part.back_idx, [1, 2, 3])

    with pytest.raises(ValueError):
        partition_by_depth_threshold(cloud_of(pts), [(intr, pose)], [depth], [])
    with pytest.raises(ValueError):
        partition_by_depth_threshold(cloud_of(pts), [(intr, pose)],
                                     [depth[:8]], [2.0])


def test_visibility_mask_is_disk_around_projection():
    intr = tiny_intrinsics()
    mask = render_visibility_mask(cloud_of([[0.0, 0.0, 2.0]]), intr,
                                  identity_pose())
    assert mask.shape == (16, 16)
    covered = np.argwhere(mask == MASK_BACK)
    # point projects to pixel (8, 8); radius-2 disk has 13 pixels
    assert len(covered) == 13
    assert (np.abs(covered - 8).max(axis=1) <= 2).all()
    assert (mask[0, :] == MASK_UNKNOWN).all()
    assert MASK_FRONT not in mask


def test_inpainted_points_lie_on_bounding_sphere():
    intr = tiny_intrinsics()
    pose = identity_pose()
    sphere = BoundingSphere(center=np.zeros(3), radius=5.0)
    back = cloud_of([[0.0, 0.0, 2.0]])
    mask = render_visibility_mask(back, intr, pose)
    depth, merged, missed = inpaint_back_depth(intr, pose, mask, sphere, back)
    assert missed == 0
    unknown = mask == MASK_UNKNOWN
    assert np.isfinite(depth[unknown]).all() and np.isnan(depth[~unknown]).all()
    new_pts = merged.positions[back.n:]
    assert len(new_pts) == unknown.sum()
    np.testing.assert_allclose(np.linalg.norm(new_pts, axis=1), 5.0, atol=1e-6)
    # new points carry zero confidence, originals keep theirs
    assert (merged.confidence[: back.n] == 1.0).all()
    assert (merged.confidence[back.n:] == 0.0).all()
    # every inpainted color is the nearest covered pixel's color, and the only
    # covered pixels all show the single back point's color
    np.testing.assert_allclose(merged.colors[back.n:],
                               np.tile(back.colors[0], (len(new_pts), 1)))


def test_inpaint_stride_and_miss_counting():
    intr = tiny_intrinsics()
    pose = identity_pose()
    # small off-axis sphere: central rays hit, corner rays miss
    sphere = BoundingSphere(center=np.array([0.0, 0.0, 10.0]), radius=2.0)
    back = cloud_of([[0.0, 0.0, 2.0]])
    mask = np.full((16, 16), MASK_UNKNOWN, dtype=np.uint8)
    depth, merged, missed = inpaint_back_depth(intr, pose, mask, sphere, back,
                                               stride=2)
    strided = np.zeros_like(mask, dtype=bool)
    strided[::2, ::2] = True
    assert np.isnan(depth[~strided]).all()
    filled = np.isfinite(depth)
    assert filled.sum() + missed == strided.sum()
    assert missed > 0 and filled.sum() > 0
    radii = np.linalg.norm(merged.positions[back.n:] - sphere.center, axis=1)
    np.testing.assert_allclose(radii, 2.0, atol=1e-6)
    # filled pixels took the far intersection, beyond the sphere center
    assert (depth[filled] > 10.0).all()
