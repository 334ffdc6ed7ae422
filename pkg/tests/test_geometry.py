"""Quaternions, poses, camera rays, spheres, voxels, and the Umeyama solve."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layersplat.geometry import (
    BoundingSphere,
    CameraIntrinsics,
    FrustumOverlapError,
    Pose,
    bounding_sphere_of_points,
    frustum_intersection_sphere,
    interpolate_poses,
    look_at_rotation,
    point_in_frustum,
    pose_distance,
    quat_from_axis_angle,
    quat_geodesic_angle,
    quat_mul,
    quat_normalize,
    quat_slerp,
    quat_to_rotmat,
    ray_aabb_intersect,
    ray_sphere_intersect,
    rotmat_to_quat,
    umeyama_align,
    voxel_downsample_arrays,
)

from conftest import tiny_intrinsics


unit_quats = st.builds(
    lambda v: v / np.linalg.norm(v),
    st.tuples(*[st.floats(-1, 1) for _ in range(4)])
    .filter(lambda t: np.linalg.norm(t) > 1e-3)
    .map(np.array),
)


@given(unit_quats)
def test_quat_to_rotmat_is_special_orthogonal(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


@given(unit_quats)
def test_rotmat_quat_roundtrip(q):
    q2 = rotmat_to_quat(quat_to_rotmat(q))
    # q and -q encode the same rotation
    sign = np.sign(np.dot(q, q2)) or 1.0
    np.testing.assert_allclose(sign * q2, q, atol=1e-9)


@given(unit_quats, unit_quats)
def test_quat_mul_matches_matrix_product(qa, qb):
    np.testing.assert_allclose(quat_to_rotmat(quat_mul(qa, qb)),
                               quat_to_rotmat(qa) @ quat_to_rotmat(qb),
                               atol=1e-12)


def test_axis_angle_about_z():
    theta = 0.3
    R = quat_to_rotmat(quat_from_axis_angle(np.array([0.0, 0.0, theta])))
    expected = np.array([[np.cos(theta), -np.sin(theta), 0.0],
                         [np.sin(theta), np.cos(theta), 0.0],
                         [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(R, expected, atol=1e-12)


@given(unit_quats, st.floats(1e-3, 3.0))
def test_geodesic_angle_recovers_applied_rotation(q, theta):
    dq = quat_from_axis_angle(np.array([theta, 0.0, 0.0]))
    assert quat_geodesic_angle(q, quat_mul(dq, q)) == pytest.approx(theta, rel=1e-6)


def test_slerp_endpoints_and_midpoint():
    qa = np.array([1.0, 0.0, 0.0, 0.0])
    qb = quat_from_axis_angle(np.array([0.0, 0.8, 0.0]))
    np.testing.assert_allclose(quat_slerp(qa, qb, 0.0), qa, atol=1e-12)
    np.testing.assert_allclose(np.abs(quat_slerp(qa, qb, 1.0)), np.abs(qb), atol=1e-12)
    mid = quat_slerp(qa, qb, 0.5)
    assert quat_geodesic_angle(qa, mid) == pytest.approx(0.4, abs=1e-9)


@given(unit_quats,
       st.tuples(*[st.floats(-3, 3) for _ in range(3)]).map(np.array),
       st.tuples(*[st.floats(-3, 3) for _ in range(3)]).map(np.array))
def test_pose_world_camera_roundtrip(q, center, p):
    pose = Pose(quat=q, center=center)
    cam = pose.world_to_camera(p[None])
    back = pose.camera_to_world(cam)
    np.testing.assert_allclose(back[0], p, atol=1e-9)


def test_pixel_rays_unit_norm_and_center_direction():
    intr = tiny_intrinsics()
    pose = Pose(quat=np.array([1.0, 0.0, 0.0, 0.0]), center=np.zeros(3))
    dirs = intr.pixel_ray_dirs()
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=2), 1.0, atol=1e-12)
    # pixel (i, j) center sits at (j + 0.5, i + 0.5); invert the pinhole model
    j, i = 3, 11
    expected = np.array([(j + 0.5 - intr.cx) / intr.fx,
                         (i + 0.5 - intr.cy) / intr.fy, 1.0])
    expected /= np.linalg.norm(expected)
    np.testing.assert_allclose(dirs[i, j], expected, atol=1e-12)
    del pose


def test_look_at_rotation_points_forward_axis_at_target():
    eye = np.array([1.0, -2.0, 0.5])
    target = np.array([0.0, 0.0, 4.0])
    R = quat_to_rotmat(look_at_rotation(eye, target))
    fwd = (target - eye) / np.linalg.norm(target - eye)
    np.testing.assert_allclose(R[:, 2], fwd, atol=1e-12)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)


def test_ray_sphere_matches_quadratic_formula():
    rng = np.random.default_rng(3)
    for _ in range(200):
        o = rng.normal(size=3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        sphere = BoundingSphere(center=rng.normal(size=3),
                                radius=rng.uniform(0.2, 2.0))
        hit = ray_sphere_intersect(o, d, sphere)
        oc = o - sphere.center
        disc = np.dot(d, oc) ** 2 - (np.dot(oc, oc) - sphere.radius ** 2)
        if disc < 0:
            assert hit is None
            continue
        t0 = -np.dot(d, oc) - np.sqrt(disc)
        t1 = -np.dot(d, oc) + np.sqrt(disc)
        if t1 < 0:
            assert hit is None  # entirely behind the origin
        else:
            assert hit is not None
            np.testing.assert_allclose(hit, (max(t0, 0.0), t1), atol=1e-9)


def test_ray_aabb_known_cases():
    lo, hi = np.zeros(3), np.ones(3)
    o = np.array([-1.0, 0.5, 0.5])
    d = np.array([1.0, 0.0, 0.0])
    assert ray_aabb_intersect(o, d, lo, hi) == pytest.approx((1.0, 2.0))
    assert ray_aabb_intersect(o, np.array([-1.0, 0.0, 0.0]), lo, hi) is None


def test_bounding_sphere_contains_all_points():
    rng = np.random.default_rng(11)
    for _ in range(20):
        pts = rng.normal(size=(rng.integers(2, 200), 3)) * rng.uniform(0.1, 5)
        s = bounding_sphere_of_points(pts)
        dist = np.linalg.norm(pts - s.center, axis=1)
        assert dist.max() <= s.radius * (1 + 1e-9) + 1e-12


def test_frustum_intersection_sphere_covers_common_volume():
    intr = tiny_intrinsics(width=32, height=32, fx=30.0, fy=30.0)
    poses = []
    for ang in (0.3, 0.8):
        center = 4.0 * np.array([np.sin(ang), 0.0, -np.cos(ang)])
        poses.append(Pose(quat=look_at_rotation(center, np.zeros(3)),
                          center=center))
    sphere = frustum_intersection_sphere([(intr, p) for p in poses], 0.5, 8.0)
    # the origin is seen by both cameras well inside [near, far]
    assert np.linalg.norm(sphere.center) <= sphere.radius + 1e-9
    for p in poses:
        assert point_in_frustum(sphere.center[None], intr, p, 0.5, 8.0)[0]


def test_frustum_intersection_raises_when_disjoint():
    intr = tiny_intrinsics()
    # perpendicular optical axes with ~21 degree half-FOV: no shared volume
    p1 = Pose(quat=np.array([1.0, 0.0, 0.0, 0.0]), center=np.zeros(3))
    p2 = Pose(quat=look_at_rotation(np.zeros(3), np.array([0.0, 1.0, 0.0])),
              center=np.zeros(3))
    with pytest.raises(FrustumOverlapError):
        frustum_intersection_sphere([(intr, p1), (intr, p2)], 0.5, 4.0)


def test_pose_distance_basics():
    a = Pose(quat=np.array([1.0, 0.0, 0.0, 0.0]), center=np.zeros(3))
    b = Pose(quat=np.array([1.0, 0.0, 0.0, 0.0]), center=np.array([3.0, 4.0, 0.0]))
    assert pose_distance(a, a) == 0.0
    assert pose_distance(a, b) == pytest.approx(5.0)
    dq = quat_from_axis_angle(np.array([0.2, 0.0, 0.0]))
    c = Pose(quat=quat_normalize(quat_mul(dq, a.quat)), center=a.center)
    assert pose_distance(a, c, rotation_weight=1.0) == pytest.approx(0.2, abs=1e-9)


def test_interpolate_poses_hits_endpoints():
    a = Pose(quat=np.array([1.0, 0.0, 0.0, 0.0]), center=np.zeros(3))
    dq = quat_from_axis_angle(np.array([0.0, 0.6, 0.0]))
    b = Pose(quat=quat_normalize(dq), center=np.array([1.0, 0.0, 0.0]))
    path = interpolate_poses([a, b], 5)
    np.testing.assert_allclose(path[0].center, a.center, atol=1e-12)
    np.testing.assert_allclose(path[-1].center, b.center, atol=1e-12)
    assert quat_geodesic_angle(path[0].quat, a.quat) < 1e-9
    assert quat_geodesic_angle(path[-1].quat, b.quat) < 1e-9


def test_voxel_downsample_one_point_per_voxel_and_idempotent():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(10_000, 3))
    cols = rng.uniform(0, 1, size=(10_000, 3))
    vox = 0.13
    kept, kept_cols = voxel_downsample_arrays(pts, cols, voxel_size=vox)
    keys = np.floor(kept / vox).astype(np.int64)
    uniq = np.unique(keys, axis=0)
    assert len(uniq) == len(kept)  # at most one representative per cell
    again, again_cols = voxel_downsample_arrays(kept, kept_cols, voxel_size=vox)
    np.testing.assert_array_equal(again, kept)
    np.testing.assert_array_equal(again_cols, kept_cols)
    assert kept_cols.shape == (len(kept), 3)


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10_000))
def test_umeyama_recovers_random_similarity(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(12, 3))
    q = rng.normal(size=4)
    R = quat_to_rotmat(q / np.linalg.norm(q))
    s = rng.uniform(0.3, 3.0)
    t = rng.normal(size=3)
    dst = s * src @ R.T + t
    sim = umeyama_align(src, dst)
    np.testing.assert_allclose(sim.scale, s, atol=1e-9)
    np.testing.assert_allclose(sim.rotation, R, atol=1e-9)
    np.testing.assert_allclose(sim.translation, t, atol=1e-9)
    np.testing.assert_allclose(sim.apply(src), dst, atol=1e-9)
