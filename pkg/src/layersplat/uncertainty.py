"""Per-pixel confidence for generated views: perturb the generator's
condition where it disagreed with the output, sample the generator several
times, and turn cross-sample variance into a loss weight in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .config import UncertaintyConfig


def condition_diff_mask(generated, condition, beta: float) -> np.ndarray:
    """1 where the mean-channel L1 between generation and condition exceeds beta."""
    generated = np.asarray(generated, dtype=np.float64)
    condition = np.asarray(condition, dtype=np.float64)
    if generated.shape != condition.shape:
        raise ValueError("resolution mismatch between generation and condition")
    diff = np.abs(generated - condition)
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    return (diff > beta).astype(np.uint8)


def perturb_condition(condition, mask, cfg: UncertaintyConfig,
                      seed: int, background: float = 0.0) -> np.ndarray:
    """Masked pixel dropout plus clipped additive noise; identity outside the
    mask and whenever dropout and noise are both zero."""
    condition = np.asarray(condition, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != condition.shape[:2]:
        raise ValueError("mask resolution mismatch")
    if not np.isin(mask, [0, 1]).all():
        raise ValueError("mask must be binary")
    out = condition.copy()
    if cfg.dropout == 0.0 and cfg.noise_sigma == 0.0:
        return out
    rng = np.random.default_rng(seed)
    inside = mask.astype(bool)
    drop = inside & (rng.random(mask.shape) < cfg.dropout)
    noise = rng.normal(0.0, cfg.noise_sigma, condition.shape)
    if condition.ndim == 3:
        sel = inside[:, :, None] & ~drop[:, :, None]
        out = np.where(sel, np.clip(out + noise, 0.0, 1.0), out)
        out[drop] = background
    else:
        sel = inside & ~drop
        out = np.where(sel, np.clip(out + noise, 0.0, 1.0), out)
        out[drop] = background
    return out


def estimate_uncertainty(samples, cfg: UncertaintyConfig | None = None):
    """Population variance across K renderings of one viewpoint, mapped to a
    weight u = exp(-var / tau). Returns (weight map, variance map)."""
    cfg = cfg or UncertaintyConfig()
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    if stack.shape[0] < 2:
        raise ValueError("variance needs at least two samples")
    if stack.ndim == 4:
        var = stack.var(axis=0).mean(axis=2)
    else:
        var = stack.var(axis=0)
    u = np.clip(np.exp(-var / cfg.tau), 0.0, 1.0)
    return u, var
