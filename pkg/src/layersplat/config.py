"""Dataclass configuration records for rendering, losses, optimization,
fusion, uncertainty, and the synthetic-scene oracle.

Defaults follow widespread splatting practice where a value is not pinned by
an experiment; training-loop iteration counts default to desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

# Cameras are rescaled so that all centers fit inside this radius.
SCENE_RADIUS = 2.0


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    near: float = 0.01
    alpha_cap: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    # early-termination transmittance; exact mode composites everything
    transmittance_min: float = 1e-4
    lowpass_px: float = 0.3
    max_contrib_per_pixel: int = 128
    exact: bool = False
    background: tuple = (0.0, 0.0, 0.0)

    def effective(self) -> "RenderConfig":
        """Exact mode disables early termination and widens the contribution cap."""
        if not self.exact:
            return self
        return RenderConfig(
            tile_size=self.tile_size,
            near=self.near,
            alpha_cap=self.alpha_cap,
            alpha_skip=self.alpha_skip,
            transmittance_min=0.0,
            lowpass_px=self.lowpass_px,
            max_contrib_per_pixel=max(self.max_contrib_per_pixel, 1024),
            exact=True,
            background=self.background,
        )


@dataclass(frozen=True)
class LossWeights:
    # bootstrap composite: photometric + mask + normal + depth
    mask: float = 1.0
    normal: float = 0.25
    depth: float = 0.1
    # fused-training regularizers
    reg_distortion: float = 100.0
    reg_normal_consistency: float = 0.25
    # photometric mix: (1 - ssim_mix) * L1 + ssim_mix * (1 - SSIM)
    ssim_mix: float = 0.2
    # distance schedule for the photometric weight during fused training
    lambda_c_base: float = 0.5
    lambda_c_rate: float = 20.0
    lambda_c_floor: float = 0.05


@dataclass(frozen=True)
class OptimConfig:
    lr_position: float = 1.6e-4
    lr_position_final_mult: float = 0.01  # exponential decay target over the run
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


@dataclass(frozen=True)
class DensifyConfig:
    start_iter: int = 166
    end_iter: int = 5000
    interval: int = 100
    grad_threshold: float = 2e-4  # mean pixel-space positional gradient
    opacity_prune: float = 5e-3
    split_factor: float = 1.6
    percent_dense: float = 0.01  # of scene extent: below -> clone, above -> split
    max_world_size: float = 1.0
    scene_extent: float = 2 * SCENE_RADIUS

    def __post_init__(self):
        if not self.start_iter < self.end_iter:
            raise ValueError("start_iter must be < end_iter")
        if min(self.grad_threshold, self.opacity_prune, self.interval) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class BootstrapConfig:
    iterations: int = 2000  # desk scale; reference experiments use 10000
    voxel_fraction: float = 0.02  # of cloud AABB diagonal
    voxel_fraction_range: tuple = (0.01, 0.03)
    randomize_voxel_fraction: bool = False
    checkpoint_every: int = 0  # 0 disables periodic checkpoints


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000  # desk scale; reference experiments use 10000
    checkpoint_every: int = 0


@dataclass(frozen=True)
class UncertaintyConfig:
    beta: float = 0.2  # condition-vs-generation L1 threshold
    samples: int = 4  # one unperturbed + (samples - 1) perturbed
    dropout: float = 0.3
    noise_sigma: float = 0.1
    tau: float = 0.01  # variance -> weight temperature

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if self.samples < 1:
            raise ValueError("need at least one sample")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class FusionConfig:
    window: int = 25  # poses per generation request
    keep: int = 8  # reliable frames accepted per iteration
    known_anchors: int = 4  # known poses mixed into each window
    unknown_total: int = 60  # desk scale; reference experiments use 300-400
    steps_per_iteration: int = 500
    rotation_weight: float = 0.0  # pose-distance metric stays translational

    def __post_init__(self):
        if self.keep > self.window - self.known_anchors:
            raise ValueError("keep must fit inside the unknown part of the window")


@dataclass(frozen=True)
class OracleConfig:
    """Synthetic generator: warp/jitter amplitudes per unit pose distance."""

    warp_px_per_unit_distance: float = 0.0
    color_jitter: float = 0.0
    warp_cycles: float = 1.5  # sinusoid periods across the image


def config_as_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass(frozen=True)
class PipelineConfig:
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
