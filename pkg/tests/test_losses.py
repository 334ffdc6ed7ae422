"""Loss terms: reference-value oracles, gradient checks, and the composite
weight wiring used by the two training stages."""

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from layersplat.config import LossWeights, RenderConfig
from layersplat.losses import (
    bootstrap_loss,
    depth_l1_loss,
    distortion_loss,
    fused_loss,
    l1_loss,
    lambda_c,
    mask_entropy_loss,
    normal_consistency_loss,
    normal_cosine_loss,
    perceptual_proxy_loss,
    photometric_loss,
    ssim_loss,
)
from layersplat.rasterizer import render

from conftest import identity_pose, random_layer, tiny_intrinsics


def rand_pair(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)


def fd_check(fn, x, grad, seed, samples=12, h=1e-6, tol=1e-4):
    """Central finite differences on a scalar-valued fn at sampled entries."""
    rng = np.random.default_rng(seed)
    for flat in rng.choice(x.size, size=min(samples, x.size), replace=False):
        ix = np.unravel_index(flat, x.shape)
        xp = x.copy()
        xp[ix] += h
        xm = x.copy()
        xm[ix] -= h
        fd = (fn(xp) - fn(xm)) / (2 * h)
        assert fd == pytest.approx(grad[ix], abs=tol), f"entry {ix}"


def test_l1_value_and_gradient():
    a, b = rand_pair((9, 7, 3), 0)
    val, grad = l1_loss(a, b)
    assert val == pytest.approx(np.abs(a - b).mean(), abs=1e-15)
    np.testing.assert_allclose(grad, np.sign(a - b) / a.size, atol=1e-15)
    w = np.random.default_rng(1).uniform(0, 1, (9, 7))
    valw, gradw = l1_loss(a, b, weight=w)
    assert valw == pytest.approx((w[:, :, None] * np.abs(a - b)).sum() / a.size,
                                 abs=1e-15)
    np.testing.assert_allclose(gradw, w[:, :, None] * np.sign(a - b) / a.size,
                               atol=1e-15)


def test_ssim_matches_reference_implementation():
    a, b = rand_pair((24, 20), 5)
    val, _ = ssim_loss(a, b)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert val == pytest.approx(1.0 - ref, abs=1e-10)
    same, _ = ssim_loss(a, a)
    assert same == pytest.approx(0.0, abs=1e-12)


def test_ssim_gradient_finite_differences():
    a, b = rand_pair((16, 14), 6)
    _, grad = ssim_loss(a, b)
    fd_check(lambda x: ssim_loss(x, b)[0], a, grad, seed=7)


def test_photometric_mixes_l1_and_dssim():
    a, b = rand_pair((18, 18, 3), 8)
    val, grad = photometric_loss(a, b, ssim_mix=0.2)
    l1v, l1g = l1_loss(a, b)
    ssv, ssg = ssim_loss(a, b)
    assert val == pytest.approx(0.8 * l1v + 0.2 * ssv, abs=1e-12)
    np.testing.assert_allclose(grad, 0.8 * l1g + 0.2 * ssg, atol=1e-12)


def test_mask_entropy_value_and_gradient():
    rng = np.random.default_rng(9)
    alpha = rng.uniform(0.05, 0.95, (10, 8))
    mask = (rng.uniform(size=(10, 8)) > 0.4).astype(float)
    val, grad = mask_entropy_loss(alpha, mask)
    expect = -(mask * np.log(alpha) + (1 - mask) * np.log(1 - alpha)).mean()
    assert val == pytest.approx(expect, abs=1e-12)
    fd_check(lambda x: mask_entropy_loss(x, mask)[0], alpha, grad, seed=10)
    with pytest.raises(ValueError):
        mask_entropy_loss(alpha, mask + 0.25)


def test_normal_cosine_value_and_gradient():
    rng = np.random.default_rng(11)
    raw = rng.normal(size=(8, 8, 3))
    prior = rng.normal(size=(8, 8, 3))
    prior /= np.linalg.norm(prior, axis=2, keepdims=True)
    valid = rng.uniform(size=(8, 8)) > 0.3
    val, grad = normal_cosine_loss(raw, prior, valid)
    unit = raw / np.linalg.norm(raw, axis=2, keepdims=True)
    cos = (unit * prior).sum(axis=2)
    assert val == pytest.approx((1 - cos)[valid].sum() / valid.sum(), abs=1e-12)
    fd_check(lambda x: normal_cosine_loss(x, prior, valid)[0], raw, grad, seed=12)


def test_depth_l1_only_counts_valid_pixels():
    rng = np.random.default_rng(13)
    d = rng.uniform(0.5, 4.0, (6, 6))
    prior = rng.uniform(0.5, 4.0, (6, 6))
    valid = np.zeros((6, 6), dtype=bool)
    valid[:3] = True
    val, grad = depth_l1_loss(d, prior, valid)
    assert val == pytest.approx(np.abs(d - prior)[valid].sum() / valid.sum(),
                                abs=1e-14)
    assert (grad[~valid] == 0).all()
    fd_check(lambda x: depth_l1_loss(x, prior, valid)[0], d, grad, seed=14)


def test_perceptual_proxy_zero_at_identity_and_gradient():
    a, b = rand_pair((24, 24, 3), 15)
    assert perceptual_proxy_loss(a, a)[0] == pytest.approx(0.0, abs=1e-12)
    val, grad = perceptual_proxy_loss(a, b)
    assert val > 0
    fd_check(lambda x: perceptual_proxy_loss(x, b)[0], a, grad, seed=16,
             samples=8, tol=1e-4)


def test_distortion_loss_wraps_contribution_stats():
    rng = np.random.default_rng(17)
    intr = tiny_intrinsics()
    buf = render([random_layer(15, 0, rng)], intr, identity_pose(),
                 RenderConfig(exact=True))
    val, grads = distortion_loss(buf)
    assert val >= 0.0
    assert grads.contrib_w is not None and grads.contrib_t is not None
    assert grads.color is None


def test_normal_consistency_small_on_flat_wall():
    # a big fronto-parallel surfel: rendered normals and depth-derived normals
    # both point straight at the camera
    from layersplat.gaussians import GaussianLayer
    from layersplat.sh import rgb_to_sh0
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = rgb_to_sh0(np.array([0.5, 0.5, 0.5]))
    wall = GaussianLayer(mu=np.array([[0.0, 0.0, 3.0]]),
                         log_scale=np.log([[5.0, 5.0]]),
                         quat=np.array([[1.0, 0.0, 0.0, 0.0]]),
                         opacity_logit=np.array([9.0]),
                         sh=sh, layer_id=0)
    intr = tiny_intrinsics(width=24, height=24, fx=30.0, fy=30.0)
    buf = render([wall], intr, identity_pose(), RenderConfig(exact=True))
    val, _ = normal_consistency_loss(buf)
    assert val == pytest.approx(0.0, abs=1e-4)


def test_lambda_c_schedule_pins():
    assert lambda_c(0.0) == 0.5
    knee = np.log(10.0) / 20.0
    assert lambda_c(knee + 1e-12) == pytest.approx(0.05, abs=1e-12)
    assert lambda_c(5.0) == 0.05
    grid = np.linspace(0.0, 1.0, 1000)
    vals = np.array([lambda_c(x) for x in grid])
    assert (np.diff(vals) <= 1e-15).all()
    assert vals.min() == 0.05
    with pytest.raises(ValueError):
        lambda_c(-0.1)


def test_bootstrap_loss_weight_wiring():
    terms = {"photometric": 1.0, "mask": 1.0, "normal": 1.0, "depth": 1.0}
    total, mult = bootstrap_loss(terms)
    assert total == pytest.approx(1.0 + 1.0 + 0.25 + 0.1, abs=1e-15)
    assert mult == {"photometric": 1.0, "mask": 1.0, "normal": 0.25, "depth": 0.1}


def test_fused_loss_weight_wiring():
    terms = {k: 1.0 for k in ("photometric", "perceptual", "mask", "normal",
                              "distortion", "normal_consistency")}
    total, mult = fused_loss(terms, x=0.0, mean_u=1.0)
    assert mult["photometric"] == 0.5 and mult["perceptual"] == 0.5
    assert mult["distortion"] == pytest.approx(100.0)
    assert mult["normal_consistency"] == pytest.approx(0.25)
    assert total == pytest.approx(0.5 + 0.5 + 1.0 + 0.25 + 100.0 + 0.25, abs=1e-12)
    # the mean uncertainty weight scales only the two regularizers
    _, mult_u = fused_loss(terms, x=0.0, mean_u=0.25)
    assert mult_u["distortion"] == pytest.approx(25.0)
    assert mult_u["normal_consistency"] == pytest.approx(0.0625)
    assert mult_u["photometric"] == mult["photometric"]
    # far from the inputs the photometric multiplier decays to the floor
    _, mult_far = fused_loss(terms, x=1.0, mean_u=1.0)
    assert mult_far["photometric"] == pytest.approx(0.05)


def test_uniform_unit_weight_matches_unweighted():
    a, b = rand_pair((14, 12, 3), 20)
    ones = np.ones((14, 12))
    for fn in (l1_loss, ssim_loss, photometric_loss):
        v0, g0 = fn(a, b)
        v1, g1 = fn(a, b, weight=ones)
        assert v1 == pytest.approx(v0, abs=1e-9)
        np.testing.assert_allclose(g1, g0, atol=1e-9)
    alpha = np.random.default_rng(21).uniform(0.1, 0.9, (14, 12))
    mask = np.ones((14, 12))
    v0, g0 = mask_entropy_loss(alpha, mask)
    v1, g1 = mask_entropy_loss(alpha, mask, weight=ones)
    assert v1 == pytest.approx(v0, abs=1e-12)
    np.testing.assert_allclose(g1, g0, atol=1e-12)


def test_loss_weight_defaults_are_pinned():
    w = LossWeights()
    assert (w.mask, w.normal, w.depth) == (1.0, 0.25, 0.1)
    assert (w.reg_distortion, w.reg_normal_consistency) == (100.0, 0.25)
    assert (w.lambda_c_base, w.lambda_c_rate, w.lambda_c_floor) == (0.5, 20.0, 0.05)
    assert w.ssim_mix == 0.2
