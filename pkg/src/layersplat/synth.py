"""Procedural ground-truth scene and dataset emission.

A textured ground plane plus a few boxes inside the front region and a distant
sky sphere give the two-layer structure something real to bite on. All
surfaces use smooth trigonometric textures so point-sampled renders are
band-limited and the scene is differentiable-friendly to fit.

Cameras are laid out so the farthest center sits exactly at the normalized
scene radius; emitted datasets are therefore already in normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SCENE_RADIUS
from .geometry import BoundingSphere, CameraIntrinsics, Pose, look_at_rotation
from .scene_io import (MASK_BACK, MASK_FRONT, PointCloud, SceneManifest,
                       ViewRecord, save_image, save_manifest, save_mask,
                       save_pfm, save_point_cloud)

_LIGHT = np.array([0.4, 0.3, 0.87])
_LIGHT.setflags(write=False)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color: tuple


@dataclass(frozen=True)
class PlaneBoxesScene:
    """Analytic scene: ground plane z=0, axis-aligned boxes, sky sphere."""

    plane_extent: float = 8.0
    sky_radius: float = 9.0
    front_radius: float = 1.2
    boxes: tuple = (
        Box((-0.55, -0.50, 0.0), (-0.05, 0.00, 0.55), (0.80, 0.25, 0.20)),
        Box((0.15, -0.20, 0.0), (0.65, 0.30, 0.40), (0.20, 0.55, 0.85)),
        Box((-0.20, 0.35, 0.0), (0.20, 0.75, 0.80), (0.95, 0.80, 0.25)),
    )

    def front_sphere(self) -> BoundingSphere:
        return BoundingSphere(center=np.zeros(3), radius=self.front_radius)

    # -- intersection helpers (vectorized over an (N,3) ray bundle) --------

    def _trace(self, origin, dirs):
        n = dirs.shape[0]
        best_t = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        kind = np.full(n, -1, dtype=np.int64)  # 0 plane, 1.. boxes, 99 sky

        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origin[2] / dirs[:, 2]
        p = origin[None, :] + t[:, None] * dirs
        ok = np.isfinite(t) & (t > 1e-6) & (np.hypot(p[:, 0], p[:, 1]) <= self.plane_extent)
        upd = ok & (t < best_t)
        best_t[upd] = t[upd]
        normal[upd] = (0.0, 0.0, 1.0)
        kind[upd] = 0

        for bi, box in enumerate(self.boxes):
            lo = np.asarray(box.lo)
            hi = np.asarray(box.hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (lo[None, :] - origin[None, :]) / dirs
                t1 = (hi[None, :] - origin[None, :]) / dirs
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            axis = np.argmax(tmin, axis=1)
            tn = tmin[np.arange(n), axis]
            tf = tmax.min(axis=1)
            ok = (tf > tn) & (tn > 1e-6)
            upd = ok & (tn < best_t)
            best_t[upd] = tn[upd]
            sgn = -np.sign(dirs[np.arange(n), axis])
            nb = np.zeros((n, 3))
            nb[np.arange(n), axis] = sgn
            normal[upd] = nb[upd]
            kind[upd] = 1 + bi

        od = origin @ dirs.T
        disc = od * od - (origin @ origin - self.sky_radius**2)
        t = -od + np.sqrt(np.maximum(disc, 0.0))
        ok = (disc > 0) & (t > 1e-6)
        upd = ok & (t < best_t)
        best_t[upd] = t[upd]
        psky = origin[None, :] + t[:, None] * dirs
        normal[upd] = -psky[upd] / self.sky_radius
        kind[upd] = 99
        return best_t, normal, kind

    def _shade(self, points, dirs, normal, kind):
        n = points.shape[0]
        col = np.zeros((n, 3))
        x, y = points[:, 0], points[:, 1]

        m = kind == 0
        col[m, 0] = 0.45 + 0.22 * np.sin(2.3 * x[m] + 0.5) * np.cos(1.6 * y[m] - 0.3)
        col[m, 1] = 0.42 + 0.20 * np.sin(1.8 * x[m] - 1.0) * np.cos(2.2 * y[m] + 0.7)
        col[m, 2] = 0.38 + 0.16 * np.sin(1.2 * (x[m] + y[m]))

        for bi, box in enumerate(self.boxes):
            m = kind == 1 + bi
            if not m.any():
                continue
            nb = normal[m]
            axis = np.argmax(np.abs(nb), axis=1)
            u = np.where(axis == 0, points[m, 1], points[m, 0])
            v = np.where(axis == 2, points[m, 1], points[m, 2])
            lambert = 0.75 + 0.25 * np.clip(nb @ _LIGHT / np.linalg.norm(_LIGHT), 0, 1)
            tex = 1.0 + 0.12 * np.sin(5.0 * u) * np.cos(5.0 * v)
            col[m] = np.asarray(box.color)[None, :] * (lambert * tex)[:, None]

        m = kind == 99
        if m.any():
            d = dirs[m]
            phi = np.arctan2(d[:, 1], d[:, 0])
            up = 0.5 * (d[:, 2] + 1.0)
            col[m, 0] = 0.20 + 0.18 * up + 0.08 * np.sin(3.0 * phi)
            col[m, 1] = 0.30 + 0.15 * up + 0.05 * np.cos(2.0 * phi)
            col[m, 2] = 0.50 + 0.20 * up
        return np.clip(col, 0.0, 1.0)

    # -- public rendering ---------------------------------------------------

    def render(self, intrinsics: CameraIntrinsics, pose: Pose) -> dict:
        """Ray-cast image, ray depth, camera-frame normals, front mask."""
        h, w = intrinsics.height, intrinsics.width
        dirs = (intrinsics.pixel_ray_dirs() @ pose.rotation.T).reshape(-1, 3)
        t, n_world, kind = self._trace(pose.center, dirs)
        if not np.isfinite(t).all():
            raise RuntimeError("ray escaped the sky sphere")
        points = pose.center[None, :] + t[:, None] * dirs
        img = self._shade(points, dirs, n_world, kind).reshape(h, w, 3)
        # orient normals toward the camera, express in the camera frame
        flip = np.sum(n_world * dirs, axis=1) > 0
        n_world = np.where(flip[:, None], -n_world, n_world)
        n_cam = (n_world @ pose.rotation).reshape(h, w, 3)
        depth = t.reshape(h, w)
        front = (kind >= 0) & (kind != 99) & (np.linalg.norm(points, axis=1) <= self.front_radius)
        mask = np.where(front, MASK_FRONT, MASK_BACK).astype(np.uint8).reshape(h, w)
        return {"image": img, "depth": depth, "normal_cam": n_cam, "mask": mask}

    def render_image(self, intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
        return self.render(intrinsics, pose)["image"]

    def sample_point_cloud(self, views, noise: float, rng,
                           stride: int = 2) -> PointCloud:
        """Stereo-model stand-in: unproject strided pixels of every view's
        depth map and jitter positions with isotropic Gaussian noise."""
        pts, cols, confs = [], [], []
        for intrinsics, pose in views:
            out = self.render(intrinsics, pose)
            dirs = intrinsics.pixel_ray_dirs() @ pose.rotation.T
            d = out["depth"][::stride, ::stride]
            rays = dirs[::stride, ::stride].reshape(-1, 3)
            p = pose.center[None, :] + d.reshape(-1, 1) * rays
            offset = rng.normal(0.0, noise, p.shape) if noise > 0 else np.zeros_like(p)
            pts.append(p + offset)
            cols.append(out["image"][::stride, ::stride].reshape(-1, 3))
            r = np.linalg.norm(offset, axis=1)
            confs.append(np.clip(1.0 - r / (3.0 * noise + 1e-12), 0.05, 1.0)
                         if noise > 0 else np.ones(len(p)))
        return PointCloud(positions=np.concatenate(pts),
                          colors=np.concatenate(cols),
                          confidence=np.concatenate(confs))


def ring_poses(n: int, height: float = 0.6, start_deg: float = 0.0,
               target=(0.0, 0.0, 0.25)) -> list:
    """Evenly spaced look-at cameras whose farthest center sits exactly on the
    normalized scene radius."""
    ring = np.sqrt(max(SCENE_RADIUS**2 - height**2, 1e-6))
    poses = []
    for i in range(n):
        a = np.deg2rad(start_deg + 360.0 * i / n)
        c = np.array([ring * np.cos(a), ring * np.sin(a), height])
        poses.append(Pose(quat=look_at_rotation(c, np.asarray(target)), center=c))
    return poses


def default_intrinsics(width: int = 128, height: int = 96,
                       focal: float = 100.0) -> CameraIntrinsics:
    return CameraIntrinsics(width=width, height=height, fx=focal, fy=focal,
                            cx=width / 2.0, cy=height / 2.0)


def emit_dataset(out_dir, scene: PlaneBoxesScene, n_views: int,
                 n_holdout: int, intrinsics: CameraIntrinsics,
                 noise: float, seed: int) -> SceneManifest:
    """Write images/depth/normal/mask files, the noisy cloud, and a manifest.

    Input views sit on one ring; holdout views interleave on a slightly
    different height so they are genuinely unseen.
    """
    out = Path(out_dir)
    for sub in ("images", "depth", "normal", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    inputs = ring_poses(n_views)
    holdouts = ring_poses(n_holdout, height=0.5,
                          start_deg=180.0 / max(n_views, 1))

    views, holdout_views = [], []
    for tag, poses, store in (("train", inputs, views),
                              ("test", holdouts, holdout_views)):
        for i, pose in enumerate(poses):
            rec = scene.render(intrinsics, pose)
            name = f"{tag}_{i:03d}"
            save_image(out / "images" / f"{name}.png", rec["image"])
            save_pfm(out / "depth" / f"{name}.pfm", rec["depth"])
            save_pfm(out / "normal" / f"{name}.pfm", rec["normal_cam"])
            save_mask(out / "masks" / f"{name}.png", rec["mask"])
            front = rec["mask"] == MASK_FRONT
            thr = float(rec["depth"][front].max() * 1.02) if front.any() else 0.0
            store.append(ViewRecord(
                image_path=out / "images" / f"{name}.png",
                intrinsics=intrinsics,
                pose=pose,
                depth_path=out / "depth" / f"{name}.pfm",
                normal_path=out / "normal" / f"{name}.pfm",
                front_mask_path=out / "masks" / f"{name}.png",
                front_depth_threshold=thr,
            ))

    cloud = scene.sample_point_cloud(
        [(intrinsics, p) for p in inputs], noise, rng)
    save_point_cloud(cloud, out / "cloud.ply")

    manifest = SceneManifest(
        root=out,
        point_cloud_path=out / "cloud.ply",
        views=views,
        holdout_views=holdout_views,
        resolution=(intrinsics.width, intrinsics.height),
        meta={"synthetic": True, "scene_kind": "plane-boxes",
              "noise": float(noise), "seed": int(seed)},
    )
    save_manifest(manifest, out / "manifest.json")
    return manifest
