"""Cameras, rigid poses, trajectory interpolation, bounding volumes, and registration.

Conventions used throughout the package:

* camera frame is OpenCV-style: x right, y down, z forward;
* a :class:`Pose` stores the world-from-camera rotation as a unit quaternion
  ``(w, x, y, z)`` and the camera center in world coordinates, so
  ``x_world = R @ x_cam + center``;
* pixel ``(i, j)`` (row, column) has its center at continuous image
  coordinates ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError


class FrustumOverlapError(ValueError):
    """Raised when camera frustums share no common volume."""


class DegenerateGeometryError(ValueError):
    """Raised when an operation receives a degenerate point configuration."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_to_rotmat(q):
    """Unit quaternion (w, x, y, z) to 3x3 rotation matrix."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(m):
    """3x3 rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis_angle):
    """Rotation vector (axis * angle, radians) to quaternion."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]) / np.sqrt(
            1.0 + 0.25 * theta * theta
        )
    axis = v / theta
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])


def quat_geodesic_angle(a, b):
    """Rotation angle (radians, in [0, pi]) between two unit quaternions."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(d, 1.0))


def quat_slerp(a, b, f):
    a = quat_normalize(a)
    b = quat_normalize(b)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(a + f * (b - a))
    theta = np.arccos(dot)
    s = np.sin(theta)
    return quat_normalize(np.sin((1 - f) * theta) / s * a + np.sin(f * theta) / s * b)


# ---------------------------------------------------------------------------
# cameras and poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def pixel_ray_dirs(self):
        """Unit ray directions in the camera frame, one per pixel, (H, W, 3)."""
        j = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        i = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        xs, ys = np.meshgrid(j, i)
        d = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform: unit quaternion + camera center."""

    quat: np.ndarray  # (4,) w, x, y, z
    center: np.ndarray  # (3,) world units

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(self.quat))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    @property
    def rotation(self):
        return quat_to_rotmat(self.quat)

    @property
    def forward(self):
        """Camera viewing direction (+z of the camera frame) in world coordinates."""
        return self.rotation[:, 2]

    def world_to_camera(self, points):
        points = np.atleast_2d(points)
        return (points - self.center) @ self.rotation

    def camera_to_world(self, points):
        points = np.atleast_2d(points)
        return points @ self.rotation.T + self.center


def look_at_rotation(center, target, up=(0.0, 0.0, 1.0)):
    """Quaternion whose +z axis points from `center` at `target` (OpenCV frame)."""
    center = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - center
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise ValueError("look-at target coincides with camera center")
    f = f / nf
    up = np.asarray(up, dtype=np.float64)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, np.array([0.0, 1.0, 0.0]))
        if np.linalg.norm(r) < 1e-9:
            r = np.cross(f, np.array([1.0, 0.0, 0.0]))
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    return rotmat_to_quat(np.stack([r, d, f], axis=1))


def pose_distance(a: Pose, b: Pose, rotation_weight: float = 0.0) -> float:
    """Distance between camera centers, optionally plus a weighted geodesic angle."""
    d = float(np.linalg.norm(a.center - b.center))
    if rotation_weight > 0.0:
        d += rotation_weight * quat_geodesic_angle(a.quat, b.quat)
    return d


def jitter_pose_look_at(base: Pose, target, magnitude: float, seed: int) -> Pose:
    """Perturb the camera position inside a ball and re-aim it at `target`."""
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=3)
    n = np.linalg.norm(direction)
    if n < 1e-12:
        direction = np.array([1.0, 0.0, 0.0])
        n = 1.0
    radius = magnitude * rng.uniform() ** (1.0 / 3.0)
    center = base.center + direction / n * radius
    return Pose(look_at_rotation(center, target), center)


# ---------------------------------------------------------------------------
# trajectory interpolation
# ---------------------------------------------------------------------------

_KNOT_EPS = 1e-9


def _catmull_rom_point(p0, p1, p2, p3, t0, t1, t2, t3, s):
    # Barry-Goldman pyramid for a single centripetal segment [t1, t2].
    a1 = ((t1 - s) * p0 + (s - t0) * p1) / (t1 - t0)
    a2 = ((t2 - s) * p1 + (s - t1) * p2) / (t2 - t1)
    a3 = ((t3 - s) * p2 + (s - t2) * p3) / (t3 - t2)
    b1 = ((t2 - s) * a1 + (s - t0) * a2) / (t2 - t0)
    b2 = ((t3 - s) * a2 + (s - t1) * a3) / (t3 - t1)
    return ((t2 - s) * b1 + (s - t1) * b2) / (t2 - t1)


def interpolate_poses(keyframes, count: int | None = None, at=None):
    """Sample poses along a centripetal Catmull-Rom spline through the
    keyframe centers, with piecewise slerp for the rotations.

    Either `count` evenly spaced samples (first and last reproduce the end
    keyframes exactly) or explicit fractional positions `at` in [0, 1] over
    the spline parameter."""
    if len(keyframes) < 2:
        raise ValueError("need at least 2 keyframes")
    if (count is None) == (at is None):
        raise ValueError("give exactly one of count or at")
    if count is not None and count < 2:
        raise ValueError("count must be >= 2")
    centers = np.stack([k.center for k in keyframes])
    ext = np.concatenate([centers[:1], centers, centers[-1:]])
    dt = np.maximum(np.sqrt(np.linalg.norm(np.diff(ext, axis=0), axis=1)), _KNOT_EPS)
    knots = np.concatenate([[0.0], np.cumsum(dt)])
    # knots[1] .. knots[-2] parameterize the real keyframes
    t_real = knots[1:-1]
    if count is not None:
        samples = np.linspace(t_real[0], t_real[-1], count)
    else:
        at = np.asarray(at, dtype=np.float64)
        if ((at < 0) | (at > 1)).any():
            raise ValueError("at fractions must lie in [0, 1]")
        samples = t_real[0] + at * (t_real[-1] - t_real[0])
    out = []
    for s in samples:
        seg = int(np.clip(np.searchsorted(t_real, s, side="right") - 1, 0, len(t_real) - 2))
        if abs(s - t_real[seg]) < 1e-12:
            c = centers[seg]
            q = keyframes[seg].quat
        elif abs(s - t_real[seg + 1]) < 1e-12:
            c = centers[seg + 1]
            q = keyframes[seg + 1].quat
        else:
            i = seg + 1  # index into the extended arrays
            c = _catmull_rom_point(
                ext[i - 1], ext[i], ext[i + 1], ext[i + 2],
                knots[i - 1], knots[i], knots[i + 1], knots[i + 2], s,
            )
            f = (s - t_real[seg]) / (t_real[seg + 1] - t_real[seg])
            q = quat_slerp(keyframes[seg].quat, keyframes[seg + 1].quat, f)
        out.append(Pose(q, c))
    return out


# ---------------------------------------------------------------------------
# bounding volumes and intersections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundingSphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise ValueError("sphere radius must be positive and finite")

    def contains(self, points):
        points = np.atleast_2d(points)
        return np.linalg.norm(points - self.center, axis=1) <= self.radius


def ray_sphere_intersect(origin, direction, sphere: BoundingSphere):
    """Entry/exit parameters (t_near, t_far) of a unit ray against a sphere,
    or None when the ray misses or the sphere lies entirely behind the origin.
    When the origin is inside, t_near is clamped to 0."""
    o = np.asarray(origin, dtype=np.float64) - sphere.center
    d = np.asarray(direction, dtype=np.float64)
    b = float(np.dot(o, d))
    c = float(np.dot(o, o)) - sphere.radius**2
    disc = b * b - c
    if disc < 0:
        return None
    sq = np.sqrt(disc)
    t0, t1 = -b - sq, -b + sq
    if t1 < 0:
        return None
    return (max(t0, 0.0), t1)


def ray_aabb_intersect(origin, direction, box_min, box_max):
    """Slab-method ray/axis-aligned-box intersection; same return contract as
    ray_sphere_intersect. Exposed as the alternative back-layer depth rule."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    t0, t1 = -np.inf, np.inf
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if o[k] < box_min[k] or o[k] > box_max[k]:
                return None
            continue
        a = (box_min[k] - o[k]) / d[k]
        b = (box_max[k] - o[k]) / d[k]
        t0 = max(t0, min(a, b))
        t1 = min(t1, max(a, b))
    if t0 > t1 or t1 < 0:
        return None
    return (max(t0, 0.0), t1)


def point_in_frustum(points, intrinsics: CameraIntrinsics, pose: Pose, near: float, far: float):
    """Boolean mask of points inside the camera frustum slab [near, far]."""
    cam = pose.world_to_camera(points)
    z = cam[:, 2]
    ok = (z >= near) & (z <= far)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    ok &= (u >= 0) & (u <= intrinsics.width) & (v >= 0) & (v <= intrinsics.height)
    return ok


def _sphere_through(support):
    """Smallest sphere with all support points (<=4) on its boundary."""
    n = len(support)
    if n == 0:
        return np.zeros(3), 0.0
    a = support[0]
    if n == 1:
        return a.copy(), 0.0
    if n == 2:
        c = 0.5 * (support[0] + support[1])
        return c, float(np.linalg.norm(support[0] - c))
    rel = np.stack(support[1:]) - a
    rhs = 0.5 * np.einsum("ij,ij->i", rel, rel)
    if n == 3:
        # solve within the plane spanned by the two edges
        g = rel @ rel.T
        try:
            ab = np.linalg.solve(g, rhs)
        except np.linalg.LinAlgError:
            return None
        c = a + ab @ rel
    else:
        try:
            p = np.linalg.solve(rel, rhs)
        except np.linalg.LinAlgError:
            return None
        c = a + p
    return c, float(np.linalg.norm(a - c))


def _welzl(points, rng):
    pts = [points[i] for i in rng.permutation(len(points))]

    def solve(end, support):
        if end == 0 or len(support) == 4:
            s = _sphere_through(support)
            return s if s is not None else (np.zeros(3), 0.0)
        p = pts[end - 1]
        c, r = solve(end - 1, support)
        if np.linalg.norm(p - c) <= r * (1 + 1e-12) + 1e-12:
            return c, r
        return solve(end - 1, support + [p])

    return solve(len(pts), [])


def _ritter_sphere(points):
    p0 = points[0]
    p1 = points[np.argmax(np.linalg.norm(points - p0, axis=1))]
    p2 = points[np.argmax(np.linalg.norm(points - p1, axis=1))]
    c = 0.5 * (p1 + p2)
    r = 0.5 * float(np.linalg.norm(p1 - p2))
    for _ in range(3):
        d = np.linalg.norm(points - c, axis=1)
        i = int(np.argmax(d))
        if d[i] <= r * (1 + 1e-12):
            break
        r = 0.5 * (r + d[i])
        c = c + (d[i] - r) / d[i] * (points[i] - c)
    return c, r


def bounding_sphere_of_points(points, seed: int = 0):
    """Near-minimal bounding sphere: Ritter pass refined by Welzl on the
    convex-hull vertices (capped for recursion safety)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 1:
        return BoundingSphere(points[0], 1e-12)
    rng = np.random.default_rng(seed)
    c_r, r_r = _ritter_sphere(points)
    cand = points
    if len(points) > 16:
        try:
            cand = points[ConvexHull(points).vertices]
        except QhullError:
            cand = points
    if len(cand) > 400:
        cand = cand[rng.choice(len(cand), 400, replace=False)]
    c_w, r_w = _welzl(cand, rng)
    # accept the Welzl sphere only if it really encloses every sample
    d = np.linalg.norm(points - c_w, axis=1).max()
    if d <= r_w * (1 + 1e-9) + 1e-12:
        return BoundingSphere(c_w, max(r_w, 1e-12))
    return BoundingSphere(c_r, max(r_r, 1e-12))


def frustum_intersection_sphere(cameras, near: float, far: float,
                                samples: int = 100_000, seed: int = 0) -> BoundingSphere:
    """Bounding sphere of the region visible to every camera within [near, far].

    The intersection region is estimated by rejection sampling inside the union
    AABB of all frustum corners; exact polytope clipping is deliberately avoided.
    """
    if len(cameras) < 2:
        raise ValueError("need at least 2 cameras")
    if not near < far:
        raise ValueError("require near < far")
    corners = []
    for intr, pose in cameras:
        us = np.array([0.0, intr.width, 0.0, intr.width])
        vs = np.array([0.0, 0.0, intr.height, intr.height])
        d = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones(4)], axis=1)
        for z in (near, far):
            corners.append(pose.camera_to_world(d * z))
    corners = np.concatenate(corners)
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(samples, 3))
    keep = np.ones(samples, dtype=bool)
    for intr, pose in cameras:
        keep &= point_in_frustum(pts, intr, pose, near, far)
        if not keep.any():
            raise FrustumOverlapError("no frustum overlap")
    return bounding_sphere_of_points(pts[keep], seed=seed)


# ---------------------------------------------------------------------------
# voxel grids
# ---------------------------------------------------------------------------

@dataclass
class VoxelGrid:
    """Occupancy of integer voxel cells; one representative point per cell."""

    origin: np.ndarray
    voxel_size: float
    cells: dict = field(default_factory=dict)  # (i, j, k) -> representative index

    def key_of(self, points):
        points = np.atleast_2d(points)
        return np.floor((points - self.origin) / self.voxel_size).astype(np.int64)


def voxel_keys(positions, origin, voxel_size):
    return np.floor((positions - origin) / voxel_size).astype(np.int64)


def voxel_downsample_arrays(positions, *parallel_arrays, voxel_size: float):
    """Collapse points to per-voxel centroids; parallel arrays are averaged.

    Output voxels are ordered by first occurrence in the input (stable,
    lowest index first). Returns (positions, *arrays).
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        raise ValueError("empty point set")
    # lattice-aligned anchor: cell boundaries are absolute multiples of the
    # voxel size, so re-downsampling centroids is an exact no-op
    origin = np.floor(positions.min(axis=0) / voxel_size) * voxel_size
    keys = voxel_keys(positions, origin, voxel_size)
    _, first_idx, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first_idx, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    bucket = rank[inverse]
    counts = np.bincount(bucket)
    outs = []
    for arr in (positions, *parallel_arrays):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            outs.append(np.bincount(bucket, weights=arr) / counts)
        else:
            cols = [np.bincount(bucket, weights=arr[:, k]) for k in range(arr.shape[1])]
            outs.append(np.stack(cols, axis=1) / counts[:, None])
    return tuple(outs)


# ---------------------------------------------------------------------------
# similarity registration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Similarity:
    """p -> scale * rotation @ p + translation."""

    scale: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def apply(self, points):
        points = np.atleast_2d(points)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "Similarity":
        r = self.rotation.T
        s = 1.0 / self.scale
        return Similarity(s, r, -s * r @ self.translation)

    @staticmethod
    def identity() -> "Similarity":
        return Similarity(1.0, np.eye(3), np.zeros(3))


def umeyama_align(source, target) -> Similarity:
    """Least-squares similarity (scale, rotation, translation) mapping source
    points onto target points (Umeyama's closed form)."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_t = dst.mean(axis=0)
    ds = src - mu_s
    dt = dst - mu_t
    cov = dt.T @ ds / n
    u, d, vt = np.linalg.svd(cov)
    if np.sum(d > 1e-12 * max(d[0], 1e-300)) < 2:
        raise DegenerateGeometryError("degenerate point configuration (rank < 2)")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    var_s = (ds**2).sum() / n
    scale = float(np.trace(np.diag(d) @ s) / var_s)
    t = mu_t - scale * rot @ mu_s
    return Similarity(scale, rot, t)
