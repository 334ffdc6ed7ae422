"""Iterative fusion: schedule unknown poses along the input trajectory, ask a
generator for windows of novel views, keep only the frames closest to known
cameras, and retrain after every growth step.

The known set is append-only; rejected frames are thrown away and simply get
regenerated later under better conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (SCENE_RADIUS, FusionConfig, LossWeights, OptimConfig,
                     RenderConfig, TrainConfig, UncertaintyConfig)
from .gaussians import save_checkpoint
from .generators import GenerationRequest, pointcloud_render_condition
from .geometry import CameraIntrinsics, Pose, interpolate_poses, jitter_pose_look_at, pose_distance
from .optim import TrainingView, train_layered
from .rasterizer import render
from .scene_io import PointCloud, save_image, save_pfm
from .uncertainty import condition_diff_mask, estimate_uncertainty, perturb_condition

PROV_INPUT = "input"
PROV_GENERATED = "generated"


@dataclass
class KnownEntry:
    pose: Pose
    image: np.ndarray
    provenance: str  # input | generated
    uncertainty: np.ndarray | None = None  # None means u == 1
    x: float = 0.0
    mask: np.ndarray | None = None  # input views only
    prior_depth: np.ndarray | None = None
    prior_normal: np.ndarray | None = None


class KnownSet:
    """Append-only pool of trusted (pose, image) pairs."""

    def __init__(self):
        self.entries: list[KnownEntry] = []

    def __len__(self):
        return len(self.entries)

    def add(self, entry: KnownEntry):
        if entry.provenance not in (PROV_INPUT, PROV_GENERATED):
            raise ValueError(f"bad provenance: {entry.provenance}")
        if entry.provenance == PROV_INPUT:
            if entry.uncertainty is not None and not (entry.uncertainty == 1.0).all():
                raise ValueError("input entries must carry unit uncertainty")
            if entry.x != 0.0:
                raise ValueError("input entries have x = 0")
        for other in self.entries:
            if pose_distance(entry.pose, other.pose) <= 1e-9:
                raise ValueError("duplicate pose in known set")
        self.entries.append(entry)

    def poses(self):
        return [e.pose for e in self.entries]

    def input_entries(self):
        return [e for e in self.entries if e.provenance == PROV_INPUT]

    def nearest_input_distance(self, pose: Pose) -> float:
        return min(pose_distance(pose, e.pose) for e in self.input_entries())

    def training_views(self, intrinsics: CameraIntrinsics):
        views = []
        for e in self.entries:
            views.append(TrainingView(
                pose=e.pose, intrinsics=intrinsics, image=e.image,
                mask=e.mask, prior_depth=e.prior_depth,
                prior_normal=e.prior_normal, uncertainty=e.uncertainty,
                x=e.x, generated=e.provenance == PROV_GENERATED))
        return views


# ---------------------------------------------------------------------------
# pose scheduling
# ---------------------------------------------------------------------------

def schedule_unknown_poses(input_poses, total: int, seed: int = 0,
                           mode: str = "mixed", jitter_radius: float = 0.12):
    """Unknown poses along the closed input trajectory, ordered so neighbors
    in the schedule are neighbors in space.

    "spline" keeps pure trajectory samples, "jitter" re-aims every sample from
    a nearby jittered center, "mixed" alternates the two.
    """
    if mode not in ("spline", "jitter", "mixed"):
        raise ValueError(f"unknown schedule mode: {mode}")
    if len(input_poses) < 2:
        raise ValueError("need at least two input poses to interpolate")
    if total <= 0:
        return []
    knots = list(input_poses)
    if len(knots) >= 3:
        knots.append(knots[0])  # close the ring
    fractions = [(j + 1) / (total + 1) for j in range(total)]
    base = interpolate_poses(knots, at=fractions)
    rng = np.random.default_rng(seed)
    target = np.zeros(3)
    out = []
    for j, pose in enumerate(base):
        jittered = mode == "jitter" or (mode == "mixed" and j % 2 == 1)
        if jittered:
            out.append(jitter_pose_look_at(pose, target, jitter_radius,
                                           int(rng.integers(2**31))))
        else:
            out.append(pose)
    return out


# ---------------------------------------------------------------------------
# window assembly
# ---------------------------------------------------------------------------

def assemble_conditions(window_poses, window_known, known_entry_idx,
                        known: KnownSet, layers, cloud: PointCloud,
                        intrinsics: CameraIntrinsics,
                        render_cfg: RenderConfig | None = None,
                        iteration: int = 0, window_index: int = 0) -> GenerationRequest:
    """Known poses condition on their real image (inputs) or a fresh render of
    the current model (generated); unknown poses on a whole-scene cloud splat."""
    conditions, kinds = [], []
    for pose, is_known, eidx in zip(window_poses, window_known, known_entry_idx):
        if is_known:
            entry = known.entries[eidx]
            if entry.provenance == PROV_INPUT:
                conditions.append(entry.image)
                kinds.append("real")
            else:
                buf = render(layers, intrinsics, pose, render_cfg)
                conditions.append(buf.color.copy())
                kinds.append("gs-render")
        else:
            conditions.append(pointcloud_render_condition(cloud, intrinsics, pose))
            kinds.append("pointcloud-render")
    return GenerationRequest(
        poses=list(window_poses), intrinsics=intrinsics, conditions=conditions,
        condition_kinds=kinds, known=list(window_known),
        iteration=iteration, window_index=window_index)


def select_reliable_frames(frames, novel_poses, known_poses, pprime: int,
                           rotation_weight: float = 0.0):
    """Keep the P' novel frames with the smallest min-distance to the window's
    known poses; ties fall to the lower window index.

    The selection objective decomposes per frame, so a sort realizes the
    subset argmin exactly.
    """
    if pprime > len(novel_poses):
        raise ValueError("cannot select more frames than the window provides")
    keys = [min(pose_distance(p, k, rotation_weight) for k in known_poses)
            for p in novel_poses]
    order = sorted(range(len(novel_poses)), key=lambda i: (keys[i], i))
    sel = sorted(order[:pprime])
    return [frames[i] for i in sel], [novel_poses[i] for i in sel], sel


# ---------------------------------------------------------------------------
# the iteration loop
# ---------------------------------------------------------------------------

@dataclass
class FusionState:
    layers: list
    known: KnownSet
    pending: list  # [(schedule_index, Pose)]
    generator: object
    cloud: PointCloud
    intrinsics: CameraIntrinsics
    fusion_cfg: FusionConfig = field(default_factory=FusionConfig)
    uncertainty_cfg: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    optim_cfg: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    render_cfg: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0
    iteration: int = 0
    artifacts_dir: Path | None = None
    metrics: list = field(default_factory=list)


def _build_window(state: FusionState):
    """Pivot on the pending pose nearest the known set, take its contiguous
    schedule neighbors as the unknown part, anchor with the nearest knowns."""
    cfg = state.fusion_cfg
    known_poses = state.known.poses()
    dist_to_known = [min(pose_distance(p, kp, cfg.rotation_weight)
                         for kp in known_poses) for _, p in state.pending]
    pivot = int(np.argmin(dist_to_known))
    n_unknown = min(cfg.window - cfg.known_anchors, len(state.pending))
    half = n_unknown // 2
    lo = min(max(pivot - half, 0), len(state.pending) - n_unknown)
    chosen = state.pending[lo:lo + n_unknown]

    pivot_pose = state.pending[pivot][1]
    anchor_order = sorted(
        range(len(state.known)),
        key=lambda i: pose_distance(state.known.entries[i].pose, pivot_pose,
                                    cfg.rotation_weight))
    anchors = anchor_order[:min(cfg.known_anchors, len(state.known))]

    poses = [state.known.entries[i].pose for i in anchors] + [p for _, p in chosen]
    known_flags = [True] * len(anchors) + [False] * len(chosen)
    entry_idx = list(anchors) + [-1] * len(chosen)
    return poses, known_flags, entry_idx, chosen


def fusion_iterate(state: FusionState) -> FusionState:
    """One growth step: generate a window, weigh it, keep the reliable part,
    retrain. Mutates and returns the state."""
    if not state.pending:
        raise ValueError("schedule exhausted")
    cfg = state.fusion_cfg
    ucfg = state.uncertainty_cfg
    it = state.iteration

    poses, flags, entry_idx, chosen = _build_window(state)
    try:
        request = assemble_conditions(
            poses, flags, entry_idx, state.known, state.layers, state.cloud,
            state.intrinsics, state.render_cfg, iteration=it, window_index=it)
        base = state.generator.generate(request, 1, state.seed + it)[0]
        masks = [condition_diff_mask(img, cond, ucfg.beta)
                 for img, cond in zip(base, request.conditions)]
        per_sample = [list(request.conditions)]
        for k in range(1, ucfg.samples):
            per_sample.append([
                perturb_condition(cond, m, ucfg,
                                  seed=int(1e6 * it + 1000 * k + p))
                for p, (cond, m) in enumerate(zip(request.conditions, masks))])
        request.per_sample_conditions = per_sample
        samples = state.generator.generate(request, ucfg.samples, state.seed + it)
    except Exception as exc:
        raise RuntimeError(
            f"generation failed in fusion iteration {it} "
            f"(window of {len(poses)} poses)") from exc

    unknown_slots = [i for i, f in enumerate(flags) if not f]
    u_maps, var_maps = {}, {}
    for slot in unknown_slots:
        u, var = estimate_uncertainty([samples[k][slot]
                                       for k in range(ucfg.samples)], ucfg)
        u_maps[slot], var_maps[slot] = u, var

    novel_frames = [samples[0][slot] for slot in unknown_slots]
    novel_poses = [poses[slot] for slot in unknown_slots]
    known_poses = [poses[i] for i, f in enumerate(flags) if f]
    keep = min(cfg.keep, len(novel_poses))
    sel_frames, sel_poses, sel = select_reliable_frames(
        novel_frames, novel_poses, known_poses, keep, cfg.rotation_weight)

    art = None
    if state.artifacts_dir is not None:
        art = Path(state.artifacts_dir) / f"iter_{it:03d}"
        art.mkdir(parents=True, exist_ok=True)

    accepted_sched = []
    for j, (frame, pose) in enumerate(zip(sel_frames, sel_poses)):
        slot = unknown_slots[sel[j]]
        x = state.known.nearest_input_distance(pose) / SCENE_RADIUS
        state.known.add(KnownEntry(
            pose=pose, image=frame, provenance=PROV_GENERATED,
            uncertainty=u_maps[slot], x=x))
        accepted_sched.append(chosen[sel[j]][0])
        if art is not None:
            save_image(art / f"frame_{j:02d}.png", frame)
            save_pfm(art / f"uncertainty_{j:02d}.pfm", u_maps[slot])

    state.pending = [(si, p) for si, p in state.pending
                     if si not in set(accepted_sched)]

    state.layers = train_layered(
        state.layers, state.known.training_views(state.intrinsics),
        TrainConfig(iterations=cfg.steps_per_iteration),
        state.optim_cfg, state.weights, state.render_cfg,
        np.random.default_rng([state.seed, it]),
        log_path=(art / "train.csv") if art is not None else None)

    mean_u = float(np.mean([u_maps[unknown_slots[s]].mean() for s in sel])) \
        if sel else 1.0
    state.metrics.append({"iteration": it, "accepted": len(sel),
                          "pending": len(state.pending), "mean_u": mean_u})
    if art is not None:
        save_checkpoint(art / "model.lsp", state.layers)
        with open(art / "known_set.txt", "w") as fh:
            for i, e in enumerate(state.known.entries):
                c = e.pose.center
                fh.write(f"{i}\t{e.provenance}\t{e.x:.6f}\t"
                         f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
    state.iteration += 1
    return state


def run_fusion(state: FusionState,
               final_train_cfg: TrainConfig | None = None) -> FusionState:
    """Iterate until the schedule is exhausted, then run the full-budget
    training pass."""
    while state.pending:
        state = fusion_iterate(state)
    final_train_cfg = final_train_cfg or TrainConfig()
    state.layers = train_layered(
        state.layers, state.known.training_views(state.intrinsics),
        final_train_cfg, state.optim_cfg, state.weights, state.render_cfg,
        np.random.default_rng([state.seed, 10**6]),
        log_path=(Path(state.artifacts_dir) / "final_train.csv"
                  if state.artifacts_dir is not None else None))
    if state.artifacts_dir is not None:
        save_checkpoint(Path(state.artifacts_dir) / "final.lsp", state.layers)
    return state
