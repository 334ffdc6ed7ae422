"""Command-line pipeline: synth | partition | bootstrap | fuse | train |
render | eval.

Each stage reads plain files, writes a directory, and records a seed-complete
``run.json`` so any stage can be replayed in isolation. Usage problems exit
with status 2, pipeline failures with 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (SCENE_RADIUS, BootstrapConfig, DensifyConfig,
                     FusionConfig, LossWeights, OptimConfig, OracleConfig,
                     RenderConfig, TrainConfig, config_as_dict)
from .evaluation import SYNTH_TAU, evaluate_run
from .fusion import (FusionState, KnownEntry, KnownSet, PROV_INPUT,
                     run_fusion, schedule_unknown_poses)
from .gaussians import BACK_LAYER, init_layer_from_cloud, load_checkpoint, save_checkpoint
from .generators import OracleGenerator, ReplayGenerator
from .geometry import (CameraIntrinsics, Pose, bounding_sphere_of_points,
                       frustum_intersection_sphere, voxel_downsample_arrays)
from .layering import (inpaint_back_depth, partition_by_depth_threshold,
                       partition_by_sphere, render_visibility_mask)
from .optim import TrainingView, bootstrap_optimize, train_layered
from .rasterizer import render
from .scene_io import (MASK_BACK, MASK_FRONT, PointCloud, load_image,
                       load_manifest, load_mask, load_pfm, save_image,
                       save_mask, save_pfm, save_point_cloud)
from .synth import PlaneBoxesScene, default_intrinsics, emit_dataset


class PipelineError(RuntimeError):
    pass


class UsageError(PipelineError):
    """Bad flag combinations or missing inputs; exits with status 2."""


def _write_run_record(out_dir, args, extra=None):
    """Seed-complete provenance; deliberately timestamp-free so identical
    invocations produce identical artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "versions": {
            "layersplat": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    }
    if extra:
        rec.update(extra)
    (out / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _apply_threads(args):
    n = getattr(args, "threads", None)
    if n is None:
        env = os.environ.get("LAYERSPLAT_THREADS")
        n = int(env) if env else None
    if n is not None:
        import numba
        numba.set_num_threads(max(1, n))


def _load_training_views(manifest, with_priors=True):
    views = []
    for rec in manifest.views:
        mask = load_mask(rec.front_mask_path) if rec.front_mask_path else None
        views.append(TrainingView(
            pose=rec.pose,
            intrinsics=rec.intrinsics,
            image=load_image(rec.image_path),
            mask=mask,
            prior_depth=load_pfm(rec.depth_path)
            if with_priors and rec.depth_path else None,
            prior_normal=load_pfm(rec.normal_path)
            if with_priors and rec.normal_path else None,
        ))
    return views


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    scene = PlaneBoxesScene()
    intr = default_intrinsics(args.width, args.height, args.focal)
    emit_dataset(args.out, scene, args.views, args.holdouts, intr,
                 args.noise, args.seed)
    _write_run_record(args.out, args, {"scene_kind": args.scene_kind})
    print(f"wrote synthetic scene with {args.views} views to {args.out}")


def cmd_partition(args):
    manifest = load_manifest(args.manifest)
    cloud = manifest.load_cloud()
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    cams = [(v.intrinsics, v.pose) for v in manifest.views]
    sphere = None
    if args.mode == "sphere":
        sphere = frustum_intersection_sphere(cams, args.near, args.far)
        part = partition_by_sphere(cloud, sphere)
        sphere_rec = {"center": sphere.center.tolist(), "radius": sphere.radius}
    else:
        depths, thresholds = [], []
        for v in manifest.views:
            if v.depth_path is None or v.front_depth_threshold is None:
                raise UsageError(
                    "depth mode needs a depth map and threshold per view")
            depths.append(load_pfm(v.depth_path))
            thresholds.append(v.front_depth_threshold)
        part = partition_by_depth_threshold(cloud, cams, depths, thresholds)
        sphere_rec = None

    for side, name in ((part.front, "front"), (part.back, "back")):
        if side is not None:
            save_point_cloud(side, out / f"{name}.ply")
    for i, v in enumerate(manifest.views):
        if args.mode == "sphere":
            if v.depth_path is None:
                raise UsageError("sphere-mode masks need per-view depth")
            depth = load_pfm(v.depth_path)
            dirs = v.intrinsics.pixel_ray_dirs() @ v.pose.rotation.T
            pts = v.pose.center[None, None, :] + depth[:, :, None] * dirs
            inside = np.linalg.norm(pts - sphere.center, axis=2) <= sphere.radius
        else:
            depth = load_pfm(v.depth_path)
            inside = depth < v.front_depth_threshold
        mask = np.where(inside, MASK_FRONT, MASK_BACK).astype(np.uint8)
        save_mask(out / "masks" / f"view_{i:03d}.png", mask)

    (out / "partition.json").write_text(json.dumps({
        "method": part.method,
        "front_count": int(part.front_idx.size),
        "back_count": int(part.back_idx.size),
        "sphere": sphere_rec,
    }, indent=2) + "\n")
    _write_run_record(out, args)
    print(f"partitioned {cloud.positions.shape[0]} points: "
          f"{part.front_idx.size} front / {part.back_idx.size} back")


def cmd_bootstrap(args):
    manifest = load_manifest(args.manifest)
    part_dir = Path(args.partition)
    front_path = part_dir / "front.ply"
    if not front_path.is_file():
        raise UsageError(f"front cloud missing: {front_path}")
    from .scene_io import load_point_cloud
    front = load_point_cloud(front_path)
    views = _load_training_views(manifest)

    boot_cfg = BootstrapConfig(iterations=args.iters,
                               randomize_voxel_fraction=args.randomize_voxel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    layer = bootstrap_optimize(
        front, views, boot_cfg, OptimConfig(), DensifyConfig(), LossWeights(),
        RenderConfig(), rng, log_path=out / "train.csv")
    save_checkpoint(out / "front.lsp", [layer])

    lo, hi = front.positions.min(axis=0), front.positions.max(axis=0)
    voxel = max(boot_cfg.voxel_fraction * float(np.linalg.norm(hi - lo)), 1e-9)
    pos, col = voxel_downsample_arrays(front.positions, front.colors,
                                       voxel_size=voxel)
    save_point_cloud(PointCloud(positions=pos, colors=col), out / "cleaned.ply")
    _write_run_record(out, args, {"bootstrap": config_as_dict(boot_cfg)})
    print(f"bootstrap finished with {layer.n} Gaussians -> {out / 'front.lsp'}")


def _build_back_layer(part_dir, manifest, schedule, rng):
    from .scene_io import load_point_cloud
    back_path = Path(part_dir) / "back.ply"
    if not back_path.is_file():
        raise UsageError(f"back cloud missing: {back_path}")
    back = load_point_cloud(back_path)
    sphere = bounding_sphere_of_points(back.positions)
    intr = manifest.views[0].intrinsics
    poses = [p for p in schedule[::max(len(schedule) // 8, 1)]][:8]
    for pose in poses:
        mask = render_visibility_mask(back, intr, pose)
        _, back, _ = inpaint_back_depth(intr, pose, mask, sphere, back, stride=6)
    lo, hi = back.positions.min(axis=0), back.positions.max(axis=0)
    voxel = max(0.02 * float(np.linalg.norm(hi - lo)), 1e-9)
    pos, col = voxel_downsample_arrays(back.positions, back.colors,
                                       voxel_size=voxel)
    return init_layer_from_cloud(pos, col, BACK_LAYER), back


def cmd_fuse(args):
    manifest = load_manifest(args.manifest)
    front_layers, _ = load_checkpoint(args.bootstrap_checkpoint)
    views = _load_training_views(manifest)
    input_poses = [v.pose for v in views]
    intr = manifest.views[0].intrinsics
    rng = np.random.default_rng(args.seed)

    schedule = schedule_unknown_poses(input_poses, args.unknown, args.seed,
                                      mode=args.schedule_mode)
    back_layer, back_cloud = _build_back_layer(args.partition, manifest,
                                               schedule, rng)
    layers = list(front_layers) + [back_layer]

    known = KnownSet()
    for v in views:
        known.add(KnownEntry(pose=v.pose, image=v.image, provenance=PROV_INPUT,
                             mask=v.mask, prior_depth=v.prior_depth,
                             prior_normal=v.prior_normal))

    whole = manifest.load_cloud()
    if args.generator == "oracle":
        if not manifest.meta.get("synthetic"):
            raise UsageError("oracle generator needs a synthetic manifest")
        gen = OracleGenerator(PlaneBoxesScene(),
                              OracleConfig(
                                  warp_px_per_unit_distance=args.oracle_warp,
                                  color_jitter=args.oracle_jitter))
    else:
        if args.replay_root is None:
            raise UsageError("--replay-root required with the replay generator")
        gen = ReplayGenerator(args.replay_root)

    fusion_cfg = FusionConfig(window=args.window, keep=args.pprime,
                              unknown_total=args.unknown,
                              steps_per_iteration=args.steps)
    state = FusionState(
        layers=layers, known=known,
        pending=list(enumerate(schedule)), generator=gen, cloud=whole,
        intrinsics=intr, fusion_cfg=fusion_cfg, seed=args.seed,
        artifacts_dir=Path(args.out))
    state = run_fusion(state, TrainConfig(iterations=args.final_iters))
    (Path(args.out) / "metrics.json").write_text(
        json.dumps(state.metrics, indent=2) + "\n")
    _write_run_record(args.out, args, {"fusion": config_as_dict(fusion_cfg)})
    print(f"fusion complete: {len(state.known)} known views, "
          f"final model at {Path(args.out) / 'final.lsp'}")


def cmd_train(args):
    layers, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    views = _load_training_views(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layers = train_layered(
        layers, views, TrainConfig(iterations=args.iters), OptimConfig(),
        LossWeights(), RenderConfig(), np.random.default_rng(args.seed),
        log_path=out / "train.csv")
    save_checkpoint(out / "final.lsp", layers)
    _write_run_record(out, args)
    print(f"training finished -> {out / 'final.lsp'}")


def cmd_render(args):
    layers, _ = load_checkpoint(args.checkpoint)
    doc = json.loads(Path(args.poses).read_text())
    it = doc["intrinsics"]
    intr = CameraIntrinsics(width=int(it["width"]), height=int(it["height"]),
                            fx=float(it["fx"]), fy=float(it["fy"]),
                            cx=float(it["cx"]), cy=float(it["cy"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(doc["poses"]):
        pose = Pose(quat=np.asarray(rec["quat"], dtype=np.float64),
                    center=np.asarray(rec["center"], dtype=np.float64))
        buf = render(layers, intr, pose, RenderConfig())
        save_image(out / f"color_{i:03d}.png", buf.color)
        save_pfm(out / f"depth_{i:03d}.pfm", buf.expected_depth())
        save_pfm(out / f"alpha_{i:03d}.pfm", buf.alpha)
        save_pfm(out / f"normal_{i:03d}.pfm", buf.unit_normal())
    _write_run_record(out, args)
    print(f"rendered {len(doc['poses'])} poses to {out}")


def cmd_eval(args):
    manifest = load_manifest(args.gt)
    tau = args.tau
    if tau is None:
        if manifest.meta.get("synthetic"):
            tau = SYNTH_TAU
        else:
            print("error: --tau is required for non-synthetic data",
                  file=sys.stderr)
            raise SystemExit(2)
    run_dir = Path(args.run)
    checkpoint = run_dir / "final.lsp"
    if not checkpoint.is_file():
        raise UsageError(f"checkpoint missing: {checkpoint}")
    out = Path(args.out) if args.out else run_dir / "eval"
    report = evaluate_run(checkpoint, manifest, tau=tau,
                          refine_poses=args.refine, out_dir=out)
    _write_run_record(out, args, {"tau": tau})
    print(f"psnr_mean {report['psnr_mean']:.3f}  "
          f"ssim_mean {report['ssim_mean']:.4f}")
    if report["fscore"] is not None:
        print(f"f1@tau {report['fscore'].f1:.4f}")


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layersplat",
                                description="layered surfel reconstruction pipeline")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (default: LAYERSPLAT_THREADS or all)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="emit a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scene-kind", default="plane-boxes", choices=["plane-boxes"])
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--holdouts", type=int, default=8)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--focal", type=float, default=100.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("partition", help="split the cloud into front/back layers")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", required=True, choices=["sphere", "depth"])
    s.add_argument("--near", type=float, default=0.1)
    s.add_argument("--far", type=float, default=2.0 * SCENE_RADIUS)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("bootstrap", help="initial front-layer optimization")
    s.add_argument("--manifest", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--iters", type=int, default=BootstrapConfig().iterations)
    s.add_argument("--out", required=True)
    s.add_argument("--randomize-voxel", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("fuse", help="iterative fusion with a view generator")
    s.add_argument("--manifest", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--bootstrap-checkpoint", required=True)
    s.add_argument("--generator", required=True, choices=["oracle", "replay"])
    s.add_argument("--replay-root", default=None)
    s.add_argument("--unknown", type=int, default=FusionConfig().unknown_total)
    s.add_argument("--pprime", type=int, default=FusionConfig().keep)
    s.add_argument("--window", type=int, default=FusionConfig().window)
    s.add_argument("--steps", type=int, default=FusionConfig().steps_per_iteration)
    s.add_argument("--final-iters", type=int, default=TrainConfig().iterations)
    s.add_argument("--schedule-mode", default="mixed",
                   choices=["spline", "jitter", "mixed"])
    s.add_argument("--oracle-warp", type=float, default=0.0)
    s.add_argument("--oracle-jitter", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("train", help="full-budget layered training")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--iters", type=int, default=TrainConfig().iterations)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render buffers at listed poses")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="evaluate a run against ground truth")
    s.add_argument("--run", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--refine", action="store_true",
                   help="refine each test pose before scoring")
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args)
    try:
        args.func(args)
    except SystemExit:
        raise
    except (FileNotFoundError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - single CLI boundary
        print(f"pipeline failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0
