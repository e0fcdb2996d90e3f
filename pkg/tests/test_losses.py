import numpy as np
import pytest

from multisplat import losses as L
from multisplat.oracle import finite_diff

RNG = np.random.default_rng(0)


def test_l1_identical_and_single_pixel():
    img = RNG.uniform(size=(4, 4, 3))
    assert L.l1_rgb(img, img)[0] == 0.0
    loss, g = L.l1_rgb(np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
    assert loss == 1.0 and g[0, 0, 0] == 1.0


def test_l1_random_recount():
    a, b = RNG.uniform(size=(5, 6, 3)), RNG.uniform(size=(5, 6, 3))
    ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert L.l1_rgb(a, b)[0] == pytest.approx(ref, rel=1e-14)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        L.l1_rgb(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_ssim_identical():
    img = RNG.uniform(size=(16, 16, 3))
    loss, g = L.ssim_loss(img, img)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_ssim_constant_images_closed_form():
    # constant images: zero variance and covariance, so SSIM is the luminance
    # term evaluated with the zero-padded (border-attenuated) local means
    a, b = 0.3, 0.7
    x, y = np.full((20, 20, 1), a), np.full((20, 20, 1), b)
    w = L.gaussian_window()
    ones = np.ones((20, 20, 1))
    cover = L._blur(ones, w)
    mx, my = a * cover, b * cover
    # with zero padding the blurred variance is a^2 (cover - cover^2), not zero
    sxx, syy, sxy = a * a * (cover - cover ** 2), b * b * (cover - cover ** 2), a * b * (cover - cover ** 2)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ref = ((2 * mx * my + c1) * (2 * sxy + c2) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))).mean()
    assert L.ssim(x, y) == pytest.approx(ref, rel=1e-12)
    # interior pixels see the full window and reduce to the pure luminance term
    smap = L.ssim_map(x, y)[0]
    lum = (2 * a * b + c1) / (a * a + b * b + c1)
    assert smap[10, 10, 0] == pytest.approx(lum, rel=1e-12)


def test_ssim_small_frame_rejected():
    with pytest.raises(ValueError, match="smaller"):
        L.ssim_loss(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_gradient_fd():
    x, y = RNG.uniform(0.1, 0.9, (12, 13, 2)), RNG.uniform(0.1, 0.9, (12, 13, 2))
    _, g = L.ssim_loss(x, y)
    num = finite_diff(lambda t: L.ssim_loss(t, y)[0], x, 1e-6)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-9)


def test_depth_l1_examples():
    d = RNG.uniform(1, 3, (4, 4))
    assert L.depth_l1(d, d)[0] == 0.0
    assert L.depth_l1(np.array([[1.0]]), np.array([[2.0]]))[0] == 1.0


def test_depth_l1_mask_recount():
    p, g = RNG.uniform(1, 3, (6, 6)), RNG.uniform(1, 3, (6, 6))
    m = RNG.uniform(size=(6, 6)) > 0.4
    loss, grad = L.depth_l1(p, g, m)
    assert loss == pytest.approx(np.abs(p[m] - g[m]).mean())
    assert not grad[~m].any()
    assert L.depth_l1(p, g, np.zeros((6, 6), bool))[0] == 0.0


def unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def test_normal_cosine_examples():
    n = unit(RNG.normal(size=(5, 5, 3)))
    assert L.normal_cosine(n, n)[0] == pytest.approx(0.0, abs=1e-15)
    assert L.normal_cosine(-n, n)[0] == pytest.approx(2.0)


def test_normal_cosine_dot_oracle():
    a, b = unit(RNG.normal(size=(5, 5, 3))), unit(RNG.normal(size=(5, 5, 3)))
    m = RNG.uniform(size=(5, 5)) > 0.3
    ref = 1 - np.mean([a[i, j] @ b[i, j] for i in range(5) for j in range(5) if m[i, j]])
    assert L.normal_cosine(a, b, m)[0] == pytest.approx(ref, rel=1e-13)


def test_cross_entropy_examples():
    logits = np.zeros((3, 3, 4))
    labels = np.zeros((3, 3), np.uint8)
    assert L.cross_entropy_seg(logits, labels)[0] == pytest.approx(np.log(4))
    logits[..., 0] = 1e3
    assert L.cross_entropy_seg(logits, labels)[0] == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_ignore_and_gradient_fd():
    logits = RNG.normal(size=(4, 5, 3))
    labels = RNG.integers(0, 3, (4, 5)).astype(np.uint8)
    labels[0, :] = 255
    loss, g = L.cross_entropy_seg(logits, labels)
    assert not g[0].any()
    num = finite_diff(lambda t: L.cross_entropy_seg(t, labels)[0], logits, 1e-6)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-10)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        L.cross_entropy_seg(np.zeros((2, 2, 3)), np.full((2, 2), 3, np.uint8))


def test_k_loss_examples():
    assert L.gradient_factor_loss(np.ones((4, 4)))[0] == 0.0
    assert L.gradient_factor_loss(np.full((4, 4), 0.9))[0] == pytest.approx(0.1)
    k = RNG.uniform(0, 2, (7, 7))
    assert L.gradient_factor_loss(k)[0] == pytest.approx(sum(abs(v - 1) for v in k.ravel()) / 49)


def test_combine_examples():
    assert L.combine(L.LossReport())[0] == 0.0
    rep = L.LossReport(l1=0.1, depth=0.2)
    total, scales = L.combine(rep, (1, 0, 0, 0.1, 0, 0))
    assert total == pytest.approx(0.1 + 0.01)
    assert scales["depth"] == pytest.approx(0.1 * 0.5)


def test_combine_weight_order_follows_terms():
    assert L.TERMS == ("l1", "ssim", "normal", "depth", "seg", "k")
    with pytest.raises(ValueError):
        L.combine(L.LossReport(), (1, 0.1))


def test_combine_skips_vanishing_terms():
    _, scales = L.combine(L.LossReport(l1=0.3, ssim=1e-13, seg=0.5))
    assert scales["ssim"] == 0.0 and scales["seg"] == pytest.approx(0.1 * 0.3 / 0.5)


def test_combine_seed_scales_match_fd_with_frozen_ratios():
    # d(total)/d(L_x) with the ratios held fixed is exactly the seed scale
    rep = L.LossReport(l1=0.2, ssim=0.4, normal=0.05, depth=1.3, seg=0.7, k=0.02)
    _, scales = L.combine(rep)
    frozen = dict(scales)

    def total(vals):
        return sum(frozen[n] * v for n, v in zip(L.TERMS, vals))

    num = finite_diff(total, [getattr(rep, n) for n in L.TERMS], 1e-6)
    np.testing.assert_allclose(num, [scales[n] for n in L.TERMS], rtol=1e-8)
    # each balanced term carries the L1 magnitude times its weight
    for n in L.TERMS[1:]:
        assert scales[n] * getattr(rep, n) == pytest.approx(0.1 * 0.2)
