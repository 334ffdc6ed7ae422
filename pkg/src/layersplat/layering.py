"""Front/back scene partition, per-view layer masks from point visibility,
and spherical depth inpainting for regions the back cloud never covers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import BoundingSphere, CameraIntrinsics, Pose, ray_sphere_intersect
from .scene_io import MASK_BACK, MASK_FRONT, MASK_UNKNOWN, PointCloud

SPLAT_RADIUS_PX = 2


@dataclass
class LayerPartition:
    """Disjoint cover of a cloud; a side with no points is stored as None
    (the cloud type itself requires at least one point)."""

    front: PointCloud | None
    back: PointCloud | None
    front_idx: np.ndarray
    back_idx: np.ndarray
    method: str  # "sphere" | "depth-threshold"
    sphere: BoundingSphere | None = None

    def __post_init__(self):
        if self.method not in ("sphere", "depth-threshold"):
            raise ValueError(f"unknown partition method: {self.method}")
        if self.method == "sphere" and self.sphere is None:
            raise ValueError("sphere partition must record its sphere")
        if np.intersect1d(self.front_idx, self.back_idx).size:
            raise ValueError("front and back overlap")


def _make_partition(cloud, inside, method, sphere=None):
    fi = np.flatnonzero(inside)
    bi = np.flatnonzero(~inside)
    return LayerPartition(
        front=cloud.select(fi) if fi.size else None,
        back=cloud.select(bi) if bi.size else None,
        front_idx=fi,
        back_idx=bi,
        method=method,
        sphere=sphere,
    )


def partition_by_sphere(cloud: PointCloud, sphere: BoundingSphere) -> LayerPartition:
    """Points with ||p - center|| <= radius go front, the rest back."""
    d = np.linalg.norm(cloud.positions - sphere.center, axis=1)
    return _make_partition(cloud, d <= sphere.radius, "sphere", sphere)


def partition_by_depth_threshold(cloud: PointCloud, cameras, depth_maps,
                                 thresholds) -> LayerPartition:
    """A point is front if any view sees it on a pixel whose prior depth is
    below that view's threshold.

    `cameras` is a list of (intrinsics, pose); depth maps hold ray depth.
    """
    if len(cameras) != len(depth_maps) or len(cameras) != len(thresholds):
        raise ValueError("need one depth map and threshold per view")
    front = np.zeros(cloud.positions.shape[0], dtype=bool)
    for (intrinsics, pose), depth, thr in zip(cameras, depth_maps, thresholds):
        if depth is None:
            raise ValueError("missing depth map for a thresholded view")
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (intrinsics.height, intrinsics.width):
            raise ValueError("depth map resolution mismatch")
        cam = pose.world_to_camera(cloud.positions)
        z = cam[:, 2]
        ok = z > 1e-9
        u = np.zeros(len(z))
        v = np.zeros(len(z))
        u[ok] = intrinsics.fx * cam[ok, 0] / z[ok] + intrinsics.cx
        v[ok] = intrinsics.fy * cam[ok, 1] / z[ok] + intrinsics.cy
        iu = np.floor(u).astype(np.int64)
        iv = np.floor(v).astype(np.int64)
        ok &= (iu >= 0) & (iu < intrinsics.width) & (iv >= 0) & (iv < intrinsics.height)
        idx = np.flatnonzero(ok)
        front[idx] |= depth[iv[idx], iu[idx]] < thr
    return _make_partition(cloud, front, "depth-threshold")


def _splat_points(cloud: PointCloud, intrinsics: CameraIntrinsics, pose: Pose,
                  radius: int = SPLAT_RADIUS_PX):
    """Z-buffered disk splats; returns (covered, colors, ray_depth)."""
    h, w = intrinsics.height, intrinsics.width
    covered = np.zeros((h, w), dtype=bool)
    colors = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    cam = pose.world_to_camera(cloud.positions)
    z = cam[:, 2]
    ok = z > 1e-9
    if not ok.any():
        return covered, colors, depth
    u = intrinsics.fx * cam[ok, 0] / z[ok] + intrinsics.cx
    v = intrinsics.fy * cam[ok, 1] / z[ok] + intrinsics.cy
    t = np.linalg.norm(cloud.positions[ok] - pose.center, axis=1)
    cols = cloud.colors[ok]
    offs = [(di, dj) for di in range(-radius, radius + 1)
            for dj in range(-radius, radius + 1)
            if di * di + dj * dj <= radius * radius]
    iu = np.round(u).astype(np.int64)
    iv = np.round(v).astype(np.int64)
    for di, dj in offs:
        rr = iv + di
        cc = iu + dj
        keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rrk, cck, tk, ck = rr[keep], cc[keep], t[keep], cols[keep]
        covered[rrk, cck] = True
        # write far-to-near so the closest splat owns the pixel color
        order = np.argsort(-tk, kind="stable")
        for i in order:
            r, c = rrk[i], cck[i]
            if tk[i] <= depth[r, c]:
                depth[r, c] = tk[i]
                colors[r, c] = ck[i]
    return covered, colors, depth


def render_visibility_mask(back: PointCloud, intrinsics: CameraIntrinsics,
                           pose: Pose, radius: int = SPLAT_RADIUS_PX) -> np.ndarray:
    """Label pixels the back cloud covers as back, the rest unknown."""
    if back.positions.shape[0] == 0:
        raise ValueError("back cloud is empty")
    covered, _, _ = _splat_points(back, intrinsics, pose, radius)
    mask = np.full(covered.shape, MASK_UNKNOWN, dtype=np.uint8)
    mask[covered] = MASK_BACK
    return mask


def inpaint_back_depth(intrinsics: CameraIntrinsics, pose: Pose,
                       mask: np.ndarray, sphere: BoundingSphere,
                       back: PointCloud, stride: int = 1):
    """Fill unknown pixels with the far sphere intersection of their rays and
    lift them to new back points.

    Returns (depth map with inpainted ray depths, augmented cloud, miss count).
    Pixels whose ray misses the sphere stay NaN and are only counted. New
    points take the color of the nearest covered back pixel in this view
    (mean back color when the view has none) and confidence 0.
    """
    mask = np.asarray(mask)
    h, w = intrinsics.height, intrinsics.width
    if mask.shape != (h, w):
        raise ValueError("mask resolution mismatch")
    covered, cols, _ = _splat_points(back, intrinsics, pose)
    dirs = intrinsics.pixel_ray_dirs() @ pose.rotation.T

    depth = np.full((h, w), np.nan)
    new_pts, new_cols = [], []
    missed = 0
    back_px = np.argwhere(mask == MASK_BACK)
    tree = cKDTree(back_px) if len(back_px) else None
    fallback = back.colors.mean(axis=0) if back.colors.shape[0] else np.full(3, 0.5)
    unknown = np.argwhere(mask == MASK_UNKNOWN)
    for r, c in unknown:
        if (r % stride) or (c % stride):
            continue
        hit = ray_sphere_intersect(pose.center, dirs[r, c], sphere)
        if hit is None:
            missed += 1
            continue
        t_far = hit[1]
        depth[r, c] = t_far
        new_pts.append(pose.center + t_far * dirs[r, c])
        if tree is not None:
            _, j = tree.query([r, c])
            rr, cc = back_px[j]
            new_cols.append(cols[rr, cc] if covered[rr, cc] else fallback)
        else:
            new_cols.append(fallback)
    if new_pts:
        add = PointCloud(
            positions=np.asarray(new_pts),
            colors=np.asarray(new_cols),
            confidence=np.zeros(len(new_pts)),
        )
        conf = back.confidence if back.confidence is not None \
            else np.ones(back.positions.shape[0])
        merged = PointCloud(
            positions=np.concatenate([back.positions, add.positions]),
            colors=np.concatenate([back.colors, add.colors]),
            confidence=np.concatenate([conf, add.confidence]),
        )
    else:
        merged = back
    return depth, merged, missed
