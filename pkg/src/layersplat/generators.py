"""Novel-view generators behind one narrow interface: a synthetic oracle that
renders a ground-truth scene and injects controlled inconsistency, and a
file-replay backend for frames produced offline by a real generator.

Also home to the point-cloud splat renderer used as the generative condition
for unknown cameras.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .config import OracleConfig
from .geometry import CameraIntrinsics, Pose, pose_distance
from .layering import _splat_points
from .scene_io import PointCloud, load_image
from .uncertainty import condition_diff_mask


@dataclass
class GenerationRequest:
    """One generator window: poses, per-pose conditions, known flags."""

    poses: list
    intrinsics: CameraIntrinsics
    conditions: list  # (H, W, 3) arrays
    condition_kinds: list  # each in {"real", "gs-render", "pointcloud-render"}
    known: list  # bool per pose
    iteration: int = 0
    window_index: int = 0
    # optional per-sample perturbed conditions, sample 0 = unperturbed
    per_sample_conditions: list | None = None

    def __post_init__(self):
        n = len(self.poses)
        if not (len(self.conditions) == len(self.condition_kinds) == len(self.known) == n):
            raise ValueError("request fields must have one entry per pose")
        if not any(self.known):
            raise ValueError("window must contain at least one known pose")
        bad = set(self.condition_kinds) - {"real", "gs-render", "pointcloud-render"}
        if bad:
            raise ValueError(f"unknown condition kinds: {sorted(bad)}")


def pointcloud_render_condition(cloud: PointCloud, intrinsics: CameraIntrinsics,
                                pose: Pose, background=(0.0, 0.0, 0.0),
                                radius: int = 2) -> np.ndarray:
    """Z-buffered splat of the whole-scene cloud; background where uncovered."""
    covered, colors, _ = _splat_points(cloud, intrinsics, pose, radius)
    img = np.empty((intrinsics.height, intrinsics.width, 3))
    img[:] = np.asarray(background, dtype=np.float64)
    img[covered] = colors[covered]
    return img


def _warp_field(shape, amplitude: float, cycles: float, rng):
    """Constant-magnitude sinusoidal displacement: |(dx, dy)| == amplitude."""
    h, w = shape
    phase = rng.uniform(0.0, 2.0 * np.pi)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    theta = 2.0 * np.pi * cycles * (rr / h + cc / w) + phase
    return amplitude * np.sin(theta), amplitude * np.cos(theta)


def _apply_warp(img, dx, dy):
    h, w = img.shape[:2]
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    coords = [rr - dy, cc - dx]
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = map_coordinates(img[:, :, c], coords, order=1, mode="nearest")
    return out


class OracleGenerator:
    """Renders a ground-truth scene per requested pose, then degrades each
    sample with a seeded warp + masked color jitter whose amplitude grows
    linearly with the pose's distance to the window's nearest known pose.

    With both amplitudes at zero every sample is the exact ground-truth
    render, which anchors the full pipeline's convergence tests.
    """

    def __init__(self, scene, cfg: OracleConfig | None = None, beta: float = 0.2):
        if scene is None or not hasattr(scene, "render_image"):
            raise ValueError("oracle needs a ground-truth scene with render_image()")
        self.scene = scene
        self.cfg = cfg or OracleConfig()
        self.beta = beta

    def generate(self, request: GenerationRequest, samples: int = 1,
                 seed: int = 0):
        known_poses = [p for p, k in zip(request.poses, request.known) if k]
        out = [[] for _ in range(samples)]
        for p_idx, pose in enumerate(request.poses):
            gt = self.scene.render_image(request.intrinsics, pose)
            if request.known[p_idx]:
                dist = 0.0
            else:
                dist = min(pose_distance(pose, kp) for kp in known_poses)
            warp_amp = self.cfg.warp_px_per_unit_distance * dist
            jitter_amp = self.cfg.color_jitter * dist
            base = None
            for k in range(samples):
                rng = np.random.default_rng([seed, request.iteration,
                                             request.window_index, p_idx, k])
                img = gt
                if warp_amp > 0.0:
                    dx, dy = _warp_field(gt.shape[:2], warp_amp,
                                         self.cfg.warp_cycles, rng)
                    img = _apply_warp(gt, dx, dy)
                if k == 0:
                    base = img
                if jitter_amp > 0.0:
                    mask = condition_diff_mask(base, request.conditions[p_idx],
                                               self.beta).astype(bool)
                    shift = rng.uniform(-jitter_amp, jitter_amp, 3)
                    img = np.where(mask[:, :, None], np.clip(img + shift, 0.0, 1.0), img)
                out[k].append(np.clip(img, 0.0, 1.0))
        return out


class ReplayGenerator:
    """Serves frames prepared offline under
    ``root/iter_{i:03d}/win_{w:03d}/sample_{k}/frame_{p:02d}.png``."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"replay root not found: {self.root}")

    def generate(self, request: GenerationRequest, samples: int = 1,
                 seed: int = 0):
        del seed  # frames are fixed on disk
        out = []
        for k in range(samples):
            frames = []
            for p_idx in range(len(request.poses)):
                path = (self.root / f"iter_{request.iteration:03d}"
                        / f"win_{request.window_index:03d}"
                        / f"sample_{k}" / f"frame_{p_idx:02d}.png")
                if not path.is_file():
                    raise FileNotFoundError(f"replay frame missing: {path}")
                frames.append(load_image(path))
            out.append(frames)
        return out
