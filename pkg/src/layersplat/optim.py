"""Adam updates, densification/pruning, and the two training loops: the
initial front-layer fit and merged-layer training with per-view uncertainty
weights.

Both loops are fully deterministic for a fixed seed: view order comes from a
seeded shuffle-cycle and every stochastic choice (voxel size, split offsets)
draws from the generator handed in by the caller.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import losses
from .config import (BootstrapConfig, DensifyConfig, LossWeights, OptimConfig,
                     RenderConfig, TrainConfig)
from .gaussians import FRONT_LAYER, GaussianLayer, init_layer_from_cloud, save_checkpoint
from .geometry import CameraIntrinsics, Pose, voxel_downsample_arrays
from .rasterizer import BufferGrads, render, render_backward
from .scene_io import MASK_FRONT, MASK_UNKNOWN, PointCloud

_PARAM_KEYS = ("mu", "log_scale", "quat", "opacity_logit", "sh")


class Adam:
    """Bias-corrected adaptive-moment updates keyed by parameter name.

    A non-finite gradient skips that parameter for the step and bumps
    `skipped`; moments and step count stay untouched so the trajectory remains
    reproducible.
    """

    def __init__(self, cfg: OptimConfig | None = None):
        self.cfg = cfg or OptimConfig()
        self._m: dict = {}
        self._v: dict = {}
        self._t: dict = {}
        self.skipped = 0

    def step(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if not np.isfinite(grad).all():
            self.skipped += 1
            return param
        m = self._m.get(key)
        if m is None:
            m = np.zeros_like(param)
            self._m[key] = m
            self._v[key] = np.zeros_like(param)
            self._t[key] = 0
        v = self._v[key]
        t = self._t[key] + 1
        self._t[key] = t
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        m += (1.0 - b1) * (grad - m)
        v += (1.0 - b2) * (grad * grad - v)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)

    def remap(self, prefix: str, keep: np.ndarray, n_new: int):
        """Keep moment rows `keep`, append zero rows for freshly added
        Gaussians; call whenever densification changes a layer's row count."""
        for key in list(self._m):
            if not key.startswith(prefix):
                continue
            for store in (self._m, self._v):
                old = store[key][keep]
                pad = np.zeros((n_new,) + old.shape[1:])
                store[key] = np.concatenate([old, pad], axis=0)


def position_lr(iteration: int, total: int, cfg: OptimConfig) -> float:
    """Exponential decay from lr_position to lr_position * final_mult."""
    frac = min(max(iteration / max(total, 1), 0.0), 1.0)
    return cfg.lr_position * cfg.lr_position_final_mult**frac


def adam_step_layer(adam: Adam, prefix: str, layer: GaussianLayer,
                    grads, lr_pos: float) -> GaussianLayer:
    cfg = adam.cfg
    lrs = {"mu": lr_pos, "log_scale": cfg.lr_scale, "quat": cfg.lr_rotation,
           "opacity_logit": cfg.lr_opacity, "sh": cfg.lr_sh}
    new = {}
    for key in _PARAM_KEYS:
        new[key] = adam.step(f"{prefix}.{key}", getattr(layer, key),
                             getattr(grads, key), lrs[key])
    return replace(layer, **new)


# ---------------------------------------------------------------------------
# densification
# ---------------------------------------------------------------------------

@dataclass
class DensifyState:
    """Running mean of per-Gaussian screen-space positional gradient norms."""

    grad_sum: np.ndarray
    seen: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "DensifyState":
        return cls(np.zeros(n), np.zeros(n))

    def accumulate(self, grad_px: np.ndarray, visible: np.ndarray):
        self.grad_sum[visible] += grad_px[visible]
        self.seen[visible] += 1

    def mean(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.seen, 1)

    def reset(self, n: int):
        self.grad_sum = np.zeros(n)
        self.seen = np.zeros(n)


def positional_gradient_px(layer: GaussianLayer, d_mu: np.ndarray, pose: Pose,
                           intrinsics: CameraIntrinsics):
    """Convert world-space center gradients to screen-pixel units.

    A transverse world step of dz/f pixels maps the densification threshold
    onto the usual screen-space scale; Gaussians behind the camera don't count.
    """
    fbar = 0.5 * (intrinsics.fx + intrinsics.fy)
    cam = pose.world_to_camera(layer.mu)
    g_cam = d_mu @ pose.rotation
    z = cam[:, 2]
    visible = z > 1e-6
    grad_px = np.zeros(layer.n)
    grad_px[visible] = (np.linalg.norm(g_cam[visible, :2], axis=1)
                       * z[visible] / fbar)
    return grad_px, visible


def densify_and_prune(layer: GaussianLayer, state: DensifyState,
                      cfg: DensifyConfig, iteration: int,
                      rng: np.random.Generator, adam: Adam | None = None,
                      adam_prefix: str = ""):
    """Clone small / split large high-gradient Gaussians, prune faint or
    oversized ones; no-op outside the configured window or off-interval."""
    in_window = cfg.start_iter <= iteration <= cfg.end_iter
    if not in_window or iteration % cfg.interval != 0:
        return layer, False

    mean_grad = state.mean()
    scales = layer.scales()
    max_scale = scales.max(axis=1)
    hot = mean_grad > cfg.grad_threshold
    small = max_scale <= cfg.percent_dense * cfg.scene_extent
    clone = hot & small
    split = hot & ~small

    pieces = [layer]
    if clone.any():
        pieces.append(layer.select(np.flatnonzero(clone)))
    split_children = None
    if split.any():
        parents = layer.select(np.flatnonzero(split))
        rot = parents.rotations()
        ps = parents.scales()
        kids = []
        for _ in range(2):
            eps = rng.standard_normal((parents.n, 2)) * ps
            offset = rot[:, :, 0] * eps[:, :1] + rot[:, :, 1] * eps[:, 1:]
            kids.append(replace(
                parents,
                mu=parents.mu + offset,
                log_scale=parents.log_scale - np.log(cfg.split_factor),
            ))
        split_children = GaussianLayer(
            layer_id=layer.layer_id,
            mu=np.concatenate([k.mu for k in kids]),
            log_scale=np.concatenate([k.log_scale for k in kids]),
            quat=np.concatenate([k.quat for k in kids]),
            opacity_logit=np.concatenate([k.opacity_logit for k in kids]),
            sh=np.concatenate([k.sh for k in kids]),
        )
        pieces.append(split_children)

    merged = pieces[0]
    for extra in pieces[1:]:
        merged = merged.concat(extra)

    # split parents die; prune faint and oversized survivors
    alive = np.ones(merged.n, dtype=bool)
    alive[:layer.n][split] = False
    alive &= merged.opacities() >= cfg.opacity_prune
    alive &= merged.scales().max(axis=1) <= cfg.max_world_size
    if not alive.any():
        alive[np.argmax(merged.opacities())] = True
    keep = np.flatnonzero(alive)
    out = merged.select(keep)

    if adam is not None:
        # moments for cloned/split rows start at zero
        src = np.where(keep < layer.n, keep, -1)
        kept_old = src[src >= 0]
        n_new = int((src < 0).sum())
        order = np.concatenate([np.flatnonzero(src >= 0), np.flatnonzero(src < 0)])
        # rows must stay in `keep` order: rebuild via permutation
        adam.remap(adam_prefix, kept_old, n_new)
        inv = np.argsort(order, kind="stable")
        for store in (adam._m, adam._v):
            for key in list(store):
                if key.startswith(adam_prefix):
                    store[key] = store[key][inv]
    state.reset(out.n)
    return out, True


# ---------------------------------------------------------------------------
# training views
# ---------------------------------------------------------------------------

@dataclass
class TrainingView:
    """Everything one optimization step needs for a single viewpoint."""

    pose: Pose
    intrinsics: CameraIntrinsics
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray | None = None  # (H, W) int codes, input views only
    prior_depth: np.ndarray | None = None  # (H, W) ray depth
    prior_normal: np.ndarray | None = None  # (H, W, 3) camera-frame unit
    uncertainty: np.ndarray | None = None  # (H, W) in [0, 1]; None = ones
    x: float = 0.0  # normalized distance to the nearest input view
    generated: bool = False

    def weight_map(self):
        if self.uncertainty is None:
            return np.ones(self.image.shape[:2])
        return self.uncertainty


def _view_cycle(n_views: int, iterations: int, rng: np.random.Generator):
    """Seeded shuffle-cycle: every view appears once per epoch."""
    order = []
    while len(order) < iterations:
        epoch = np.arange(n_views)
        rng.shuffle(epoch)
        order.extend(epoch.tolist())
    return order[:iterations]


def _log_writer(path):
    if path is None:
        return None, None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    return fh, writer


# ---------------------------------------------------------------------------
# bootstrap: initial front-layer fit
# ---------------------------------------------------------------------------

def bootstrap_optimize(cloud: PointCloud, views: list[TrainingView],
                       boot_cfg: BootstrapConfig | None = None,
                       optim_cfg: OptimConfig | None = None,
                       densify_cfg: DensifyConfig | None = None,
                       weights: LossWeights | None = None,
                       render_cfg: RenderConfig | None = None,
                       rng: np.random.Generator | None = None,
                       log_path=None, checkpoint_dir=None) -> GaussianLayer:
    """Voxel-downsample the front cloud, seed surfels, then fit them to the
    input views under photometric + mask + normal + depth supervision with
    densification active inside its window."""
    boot_cfg = boot_cfg or BootstrapConfig()
    optim_cfg = optim_cfg or OptimConfig()
    densify_cfg = densify_cfg or DensifyConfig()
    weights = weights or LossWeights()
    render_cfg = render_cfg or RenderConfig()
    rng = rng or np.random.default_rng(0)
    if cloud.positions.shape[0] == 0:
        raise ValueError("empty front point cloud")
    if not views:
        raise ValueError("bootstrap needs at least one view")

    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    frac = boot_cfg.voxel_fraction
    if boot_cfg.randomize_voxel_fraction:
        frac = rng.uniform(*boot_cfg.voxel_fraction_range)
    voxel = max(frac * diag, 1e-9)
    pos, col = voxel_downsample_arrays(cloud.positions, cloud.colors,
                                       voxel_size=voxel)
    if pos.shape[0] == 0:
        raise ValueError("voxel downsampling left no points")
    layer = init_layer_from_cloud(pos, col, FRONT_LAYER)

    adam = Adam(optim_cfg)
    densify_state = DensifyState.empty(layer.n)
    order = _view_cycle(len(views), boot_cfg.iterations, rng)
    fh, log = _log_writer(log_path)
    if log:
        log.writerow(["iteration", "total", "photometric", "mask", "normal",
                      "depth", "count", "skipped"])

    try:
        for it in range(1, boot_cfg.iterations + 1):
            view = views[order[it - 1]]
            buf = render([layer], view.intrinsics, view.pose, render_cfg)

            front_w = (view.mask == MASK_FRONT).astype(np.float64)
            known_w = (view.mask != MASK_UNKNOWN).astype(np.float64)
            target_front = (view.mask == MASK_FRONT).astype(np.float64)

            terms = {}
            grads = BufferGrads()
            v, g = losses.photometric_loss(buf.color, view.image, weight=front_w,
                                           ssim_mix=weights.ssim_mix)
            terms["photometric"] = v
            grads = grads.add(BufferGrads(color=g))
            v, g = losses.mask_entropy_loss(buf.alpha, target_front, weight=known_w)
            terms["mask"] = v
            grads = grads.add(BufferGrads(alpha=weights.mask * g))
            if view.prior_normal is not None and weights.normal > 0:
                valid = front_w > 0
                if view.prior_depth is not None:
                    valid &= np.isfinite(view.prior_depth)
                v, g = losses.normal_cosine_loss(buf.normal_raw, view.prior_normal,
                                                 valid)
                terms["normal"] = v
                grads = grads.add(BufferGrads(normal_raw=weights.normal * g))
            if view.prior_depth is not None and weights.depth > 0:
                valid = (front_w > 0) & np.isfinite(view.prior_depth)
                v, g = losses.depth_l1_loss(buf.expected_depth(), view.prior_depth,
                                            valid)
                terms["depth"] = v
                grads = grads.add(BufferGrads(depth=weights.depth * g))

            total, _ = losses.bootstrap_loss(terms, weights)
            layer_grads, _ = render_backward(buf, grads)
            lg = layer_grads[0]

            grad_px, visible = positional_gradient_px(layer, lg.mu, view.pose,
                                                      view.intrinsics)
            densify_state.accumulate(grad_px, visible)

            layer = adam_step_layer(adam, "front", layer, lg,
                                    position_lr(it, boot_cfg.iterations, optim_cfg))
            layer, _ = densify_and_prune(layer, densify_state, densify_cfg, it,
                                         rng, adam, "front")

            if log and (it % 50 == 0 or it == 1 or it == boot_cfg.iterations):
                log.writerow([it, f"{total:.6f}",
                              f"{terms.get('photometric', 0.0):.6f}",
                              f"{terms.get('mask', 0.0):.6f}",
                              f"{terms.get('normal', 0.0):.6f}",
                              f"{terms.get('depth', 0.0):.6f}",
                              layer.n, adam.skipped])
            if checkpoint_dir and boot_cfg.checkpoint_every and \
                    it % boot_cfg.checkpoint_every == 0:
                out = Path(checkpoint_dir)
                out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(out / f"bootstrap_{it:06d}.lsp", [layer])
    finally:
        if fh:
            fh.close()
    return layer


# ---------------------------------------------------------------------------
# merged-layer training with per-view uncertainty
# ---------------------------------------------------------------------------

def train_layered(layers: list[GaussianLayer], views: list[TrainingView],
                  train_cfg: TrainConfig | None = None,
                  optim_cfg: OptimConfig | None = None,
                  weights: LossWeights | None = None,
                  render_cfg: RenderConfig | None = None,
                  rng: np.random.Generator | None = None,
                  log_path=None) -> list[GaussianLayer]:
    """Optimize all layers jointly in a single merged render pass per step.

    Pixel terms are uncertainty-weighted; scalar regularizers scale with the
    view's mean uncertainty; the photometric weight decays with the view's
    distance to the nearest input view. Densification stays off, so the
    Gaussian count is invariant.
    """
    train_cfg = train_cfg or TrainConfig()
    optim_cfg = optim_cfg or OptimConfig()
    weights = weights or LossWeights()
    render_cfg = render_cfg or RenderConfig()
    rng = rng or np.random.default_rng(0)
    if not views:
        raise ValueError("training needs at least one view")
    layers = [layer.copy() for layer in layers]
    front_idx = next((i for i, l in enumerate(layers) if l.layer_id == FRONT_LAYER), None)

    adam = Adam(optim_cfg)
    order = _view_cycle(len(views), train_cfg.iterations, rng)
    fh, log = _log_writer(log_path)
    if log:
        log.writerow(["iteration", "total", "photometric", "perceptual", "mask",
                      "normal", "distortion", "normal_consistency", "skipped"])

    try:
        for it in range(1, train_cfg.iterations + 1):
            view = views[order[it - 1]]
            buf = render(layers, view.intrinsics, view.pose, render_cfg)
            u = view.weight_map()
            mean_u = float(u.mean())

            terms = {}
            part = {}
            v, g = losses.photometric_loss(buf.color, view.image, weight=u,
                                           ssim_mix=weights.ssim_mix)
            terms["photometric"] = v
            part["photometric"] = BufferGrads(color=g)
            v, g = losses.perceptual_proxy_loss(buf.color, view.image, weight=u)
            terms["perceptual"] = v
            part["perceptual"] = BufferGrads(color=g)
            if view.mask is not None and front_idx is not None:
                known_w = (view.mask != MASK_UNKNOWN).astype(np.float64) * u
                target_front = (view.mask == MASK_FRONT).astype(np.float64)
                v, g = losses.mask_entropy_loss(buf.alpha_layers[front_idx],
                                                target_front, weight=known_w)
                terms["mask"] = v
                ga = np.zeros_like(buf.alpha_layers)
                ga[front_idx] = g
                part["mask"] = BufferGrads(alpha_layers=ga)
            if view.prior_normal is not None:
                valid = (view.mask == MASK_FRONT) if view.mask is not None \
                    else np.ones(u.shape, dtype=bool)
                v, g = losses.normal_cosine_loss(buf.normal_raw, view.prior_normal,
                                                 valid, weight=u)
                terms["normal"] = v
                part["normal"] = BufferGrads(normal_raw=g)
            v, gb = losses.distortion_loss(buf)
            terms["distortion"] = v
            part["distortion"] = gb
            v, gb = losses.normal_consistency_loss(buf)
            terms["normal_consistency"] = v
            part["normal_consistency"] = gb

            total, mult = losses.fused_loss(terms, view.x, mean_u, weights)
            grads = BufferGrads()
            for name, gb in part.items():
                scaled = BufferGrads(
                    **{f.name: (None if getattr(gb, f.name) is None
                                else mult[name] * getattr(gb, f.name))
                       for f in gb.__dataclass_fields__.values()})
                grads = grads.add(scaled)

            layer_grads, _ = render_backward(buf, grads)
            lr_pos = position_lr(it, train_cfg.iterations, optim_cfg)
            layers = [adam_step_layer(adam, f"layer{l.layer_id}", l, lg, lr_pos)
                      for l, lg in zip(layers, layer_grads)]

            if log and (it % 50 == 0 or it == 1 or it == train_cfg.iterations):
                log.writerow([it, f"{total:.6f}"] +
                             [f"{terms.get(k, 0.0):.6f}" for k in
                              ("photometric", "perceptual", "mask", "normal",
                               "distortion", "normal_consistency")] +
                             [adam.skipped])
    finally:
        if fh:
            fh.close()
    return layers
