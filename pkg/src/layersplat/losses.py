"""Loss terms with hand-derived gradients w.r.t. the rendered buffers, plus
the two composites (bootstrap and uncertainty-weighted fused training) and
the distance-decayed photometric weight schedule.

Every pixel-space term accepts an optional per-pixel weight map; weighted
terms keep the unweighted normalization (divide by pixel count), so an
all-ones weight map reproduces the unweighted loss bit-for-bit.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import LossWeights
from .rasterizer import BufferGrads, RenderBuffers, distortion_stats

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # 11-tap window
_SSIM_PAD = 5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_ENTROPY_CLAMP = 1e-6
_NORM_EPS = 1e-12


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")


def _expand_weight(weight, shape):
    if weight is None:
        return None
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape != shape[:2]:
        raise ValueError("weight map resolution mismatch")
    return weight


# ---------------------------------------------------------------------------
# photometric: 0.8 L1 + 0.2 (1 - SSIM)
# ---------------------------------------------------------------------------

def l1_loss(render, target, weight=None):
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(render, target)
    diff = render - target
    n = diff.shape[0] * diff.shape[1]
    chans = 1 if diff.ndim == 2 else diff.shape[2]
    w = _expand_weight(weight, render.shape)
    scale = np.sign(diff) / (n * chans)
    if w is not None:
        wc = w if diff.ndim == 2 else w[:, :, None]
        return float((wc * np.abs(diff)).sum() / (n * chans)), scale * wc
    return float(np.abs(diff).sum() / (n * chans)), scale


def _ssim_channel(x, y, weight):
    """Per-pixel SSIM on one channel; loss contribution and gradient w.r.t x.

    The mean runs over the interior (5 px crop), where the Gaussian window
    never touches the border padding, so values match the reference SSIM.
    """
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    f = lambda im: gaussian_filter(im, _SSIM_SIGMA, mode="nearest", truncate=_SSIM_TRUNCATE)
    ux, uy = f(x), f(y)
    m2 = f(x * x)
    mxy = f(x * y)
    uyy = f(y * y)
    vx = m2 - ux * ux
    vy = uyy - uy * uy
    vxy = mxy - ux * uy
    a1 = 2 * ux * uy + c1
    a2 = 2 * vxy + c2
    b1 = ux * ux + uy * uy + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)

    p = _SSIM_PAD
    interior = np.zeros_like(s)
    interior[p:-p, p:-p] = 1.0
    n_int = interior.sum()
    w_map = interior if weight is None else interior * weight
    value = float((w_map * (1.0 - s)).sum() / n_int)

    # gradient of sum(w * (1 - s)) / n_int w.r.t. x
    q = -w_map / n_int
    g2 = -s / b2  # d s / d m2 (via vx)
    gxy = 2 * a1 / (b1 * b2)  # d s / d mxy (via vxy)
    gmu = 2 * uy * a2 / (b1 * b2) - 2 * s * ux / b1 - 2 * ux * g2 - uy * gxy
    back = lambda im: gaussian_filter(im, _SSIM_SIGMA, mode="constant", cval=0.0,
                                      truncate=_SSIM_TRUNCATE)
    grad = back(q * gmu) + 2 * x * back(q * g2) + y * back(q * gxy)
    return value, grad


def ssim_loss(render, target, weight=None):
    """Mean (1 - SSIM) over the valid interior; channels averaged."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(render, target)
    if render.shape[0] <= 2 * _SSIM_PAD or render.shape[1] <= 2 * _SSIM_PAD:
        raise ValueError("image too small for the 11x11 SSIM window")
    w = _expand_weight(weight, render.shape)
    if render.ndim == 2:
        return _ssim_channel(render, target, w)
    vals = []
    grad = np.zeros_like(render)
    for c in range(render.shape[2]):
        v, g = _ssim_channel(render[:, :, c], target[:, :, c], w)
        vals.append(v)
        grad[:, :, c] = g
    k = render.shape[2]
    return float(sum(vals) / k), grad / k


def photometric_loss(render, target, weight=None, ssim_mix: float = 0.2):
    """(1 - ssim_mix) * L1 + ssim_mix * (1 - SSIM), both weighted per pixel."""
    v1, g1 = l1_loss(render, target, weight)
    v2, g2 = ssim_loss(render, target, weight)
    return (1.0 - ssim_mix) * v1 + ssim_mix * v2, (1.0 - ssim_mix) * g1 + ssim_mix * g2


# ---------------------------------------------------------------------------
# mask / normal / depth supervision
# ---------------------------------------------------------------------------

def mask_entropy_loss(alpha, mask, weight=None):
    """Binary cross-entropy between an accumulated alpha map and a 0/1 mask."""
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    _check_same_shape(alpha, mask)
    if not np.isin(mask, [0.0, 1.0]).all():
        raise ValueError("mask must be binary")
    a = np.clip(alpha, _ENTROPY_CLAMP, 1.0 - _ENTROPY_CLAMP)
    bce = -(mask * np.log(a) + (1.0 - mask) * np.log1p(-a))
    n = alpha.size
    inside = (alpha > _ENTROPY_CLAMP) & (alpha < 1.0 - _ENTROPY_CLAMP)
    grad = np.where(inside, -(mask / a - (1.0 - mask) / (1.0 - a)), 0.0) / n
    w = _expand_weight(weight, alpha.shape)
    if w is not None:
        return float((w * bce).sum() / n), grad * w
    return float(bce.sum() / n), grad


def normal_cosine_loss(normal_raw, prior_normals, valid, weight=None):
    """Mean (1 - n . n_prior) over valid pixels; n is the unit-normalized
    rendered normal buffer, n_prior is assumed unit."""
    normal_raw = np.asarray(normal_raw, dtype=np.float64)
    prior_normals = np.asarray(prior_normals, dtype=np.float64)
    _check_same_shape(normal_raw, prior_normals)
    valid = np.asarray(valid, dtype=bool)
    n_valid = max(int(valid.sum()), 1)
    norm = np.linalg.norm(normal_raw, axis=2, keepdims=True)
    denom = np.maximum(norm, _NORM_EPS)
    unit = normal_raw / denom
    cos = np.sum(unit * prior_normals, axis=2)
    w = _expand_weight(weight, normal_raw.shape)
    w_full = np.where(valid, 1.0 if w is None else w, 0.0)
    value = float((w_full * (1.0 - cos)).sum() / n_valid)
    # d(1-cos)/d raw = -(I - unit unit^T) prior / max(|raw|, eps)
    up = -(w_full / n_valid)[:, :, None] * prior_normals
    proj = up - unit * np.sum(up * unit, axis=2, keepdims=True)
    return value, proj / denom


def depth_l1_loss(depth, prior_depth, valid, weight=None):
    """Mean |D - D_prior| over valid pixels; gradient w.r.t. the rendered
    (alpha-normalized) depth."""
    depth = np.asarray(depth, dtype=np.float64)
    prior_depth = np.asarray(prior_depth, dtype=np.float64)
    _check_same_shape(depth, prior_depth)
    valid = np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(depth)
    w = _expand_weight(weight, depth.shape)
    w_full = np.where(valid, 1.0 if w is None else w, 0.0)
    diff = depth - prior_depth
    value = float((w_full * np.abs(diff)).sum() / n_valid)
    return value, w_full * np.sign(diff) / n_valid


# ---------------------------------------------------------------------------
# regularizers on the render itself
# ---------------------------------------------------------------------------

def distortion_loss(buffers: RenderBuffers):
    """Pairwise blend-weight/ray-depth concentration penalty, mean per pixel.

    Returns (value, BufferGrads carrying per-contribution gradients); feed the
    grads to render_backward to reach the Gaussian parameters.
    """
    value, dw, dt = distortion_stats(buffers)
    return float(value), BufferGrads(contrib_w=dw, contrib_t=dt)


def _depth_to_normals(buffers: RenderBuffers):
    """Camera-frame normals from central differences of back-projected depth.

    Treated as a fixed reference (no gradient through the depth map); pixels
    without solid coverage in their neighborhood are invalid.
    """
    rays = buffers.ctx.rays
    depth = buffers.expected_depth()
    pts = rays.origin + depth[:, :, None] * rays.dirs
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 1:-1] = 0.5 * (pts[:, 2:] - pts[:, :-2])
    dv[1:-1, :] = 0.5 * (pts[2:, :] - pts[:-2, :])
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=2, keepdims=True)
    ok = norm[:, :, 0] > _NORM_EPS
    n = np.where(ok[:, :, None], n / np.maximum(norm, _NORM_EPS), 0.0)
    # orient toward the camera and move to the camera frame
    flip = np.sum(n * rays.dirs, axis=2) > 0
    n = np.where(flip[:, :, None], -n, n)
    n_cam = n @ rays.rotation
    covered = buffers.alpha > 0.5
    solid = covered.copy()
    solid[:, 1:-1] &= covered[:, 2:] & covered[:, :-2]
    solid[1:-1, :] &= covered[2:, :] & covered[:-2, :]
    solid[:, [0, -1]] = False
    solid[[0, -1], :] = False
    return n_cam, solid & ok


def normal_consistency_loss(buffers: RenderBuffers, weight=None):
    """Mean (1 - n . n_depth): rendered normals against normals derived from
    the rendered depth map (the latter held fixed)."""
    n_depth, valid = _depth_to_normals(buffers)
    value, grad_raw = normal_cosine_loss(buffers.normal_raw, n_depth, valid, weight)
    return value, BufferGrads(normal_raw=grad_raw)


# ---------------------------------------------------------------------------
# perceptual proxy: multi-octave Sobel gradient-magnitude L1
# ---------------------------------------------------------------------------

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
_SOBEL_Y = _SOBEL_X.T
_EDGE_EPS = 1e-12


def _conv3(img, k):
    out = np.zeros_like(img)
    pad = np.pad(img, 1)
    for di in range(3):
        for dj in range(3):
            out += k[di, dj] * pad[di:di + img.shape[0], dj:dj + img.shape[1]]
    return out


def _conv3_t(img, k):
    return _conv3(img, k[::-1, ::-1])


def _downsample2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    c = img[:h, :w]
    return 0.25 * (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2])


def _upsample2_t(grad, shape):
    out = np.zeros(shape)
    h, w = grad.shape[0] * 2, grad.shape[1] * 2
    for di in (0, 1):
        for dj in (0, 1):
            out[di:h:2, dj:w:2] += 0.25 * grad
    return out


def _edge_magnitude(img):
    gx = _conv3(img, _SOBEL_X)
    gy = _conv3(img, _SOBEL_Y)
    m = np.sqrt(gx * gx + gy * gy + _EDGE_EPS)
    return m, gx, gy


def perceptual_proxy_loss(render, target, weight=None, octaves: int = 3):
    """L1 between Sobel edge magnitudes at `octaves` scales, averaged.

    DC-invariant by construction; stands in for a learned perceptual score.
    """
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(render, target)
    chans = 1 if render.ndim == 2 else render.shape[2]
    xs = [render[:, :, c] for c in range(chans)] if render.ndim == 3 else [render]
    ys = [target[:, :, c] for c in range(chans)] if render.ndim == 3 else [target]
    w0 = _expand_weight(weight, render.shape)

    total = 0.0
    grads = [np.zeros_like(xs[0]) for _ in range(chans)]
    for c in range(chans):
        x_lv, y_lv, w_lv = xs[c], ys[c], w0
        chain = []  # shapes for transposed upsampling
        for o in range(octaves):
            mx, gx, gy = _edge_magnitude(x_lv)
            my, _, _ = _edge_magnitude(y_lv)
            diff = mx - my
            n = diff.size
            wmap = 1.0 if w_lv is None else w_lv
            total += float((wmap * np.abs(diff)).sum() / n) / (octaves * chans)
            up = (wmap * np.sign(diff)) / (n * octaves * chans)
            g_lv = _conv3_t(up * gx / mx, _SOBEL_X) + _conv3_t(up * gy / mx, _SOBEL_Y)
            for shape in reversed(chain):
                g_lv = _upsample2_t(g_lv, shape)
            grads[c] += g_lv
            if o + 1 < octaves:
                if min(x_lv.shape) < 8:
                    break
                chain.append(x_lv.shape)
                x_lv = _downsample2(x_lv)
                y_lv = _downsample2(y_lv)
                w_lv = None if w_lv is None else _downsample2(w_lv)
    grad = grads[0] if render.ndim == 2 else np.stack(grads, axis=2)
    return total, grad


# ---------------------------------------------------------------------------
# schedules and composites
# ---------------------------------------------------------------------------

def lambda_c(x: float, weights: LossWeights = LossWeights()) -> float:
    """Distance-decayed photometric weight max(0.5 e^(-20 x), 0.05)."""
    if x < 0:
        raise ValueError("distance must be >= 0")
    return max(weights.lambda_c_base * np.exp(-weights.lambda_c_rate * x),
               weights.lambda_c_floor)


def bootstrap_loss(terms: dict, weights: LossWeights = LossWeights()):
    """Weighted sum for the initial front-layer fit; returns (total, per-term
    multipliers) so callers can scale term gradients identically."""
    mult = {
        "photometric": 1.0,
        "mask": weights.mask,
        "normal": weights.normal,
        "depth": weights.depth,
    }
    total = sum(mult[k] * terms.get(k, 0.0) for k in mult)
    return float(total), mult


def fused_loss(terms: dict, x: float, mean_u: float,
               weights: LossWeights = LossWeights()):
    """Uncertainty-weighted training composite.

    Pixel terms (photometric, perceptual, mask, normal) are expected to be
    already uncertainty-weighted per pixel; scalar regularizers are scaled by
    the mean uncertainty weight. Returns (total, per-term multipliers).
    """
    lc = lambda_c(x, weights)
    mult = {
        "photometric": lc,
        "perceptual": lc,
        "mask": weights.mask,
        "normal": weights.normal,
        "distortion": weights.reg_distortion * mean_u,
        "normal_consistency": weights.reg_normal_consistency * mean_u,
    }
    total = sum(mult[k] * terms.get(k, 0.0) for k in mult)
    return float(total), mult
