import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multisplat.evaluation import (abs_rel, cos_simi, evaluate_scene, hausdorff, miou, nearest_distances, psnr,
                                   rmse, sample_scene_points, ssim, zscore_outliers)
from multisplat.scene import Scene, logit


def test_psnr_examples():
    gt = np.full((4, 4, 3), 0.5)
    assert psnr(gt, gt) == 100.0
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)
    assert psnr(np.full((4, 4, 3), 1.7), np.ones((4, 4, 3))) == 100.0  # clipped to [0, 1]
    assert psnr(gt, gt, mask=np.zeros((4, 4), bool)) is None


def test_ssim_identical_is_one():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0)


def test_depth_metrics_examples():
    gt = np.random.default_rng(1).uniform(1, 5, (8, 8))
    assert abs_rel(1.1 * gt, gt) == pytest.approx(0.1)
    assert rmse(gt + 0.3, gt) == pytest.approx(0.3)
    gt[:4] = 0.0  # no data
    assert abs_rel(1.1 * gt + 7 * (gt == 0), gt) == pytest.approx(0.1)
    assert abs_rel(gt, np.zeros((8, 8))) is None


def test_cos_simi_examples():
    n = np.zeros((2, 2, 3))
    n[..., 2] = 1
    assert cos_simi(n, n) == pytest.approx(1.0)
    assert cos_simi(-n, n) == pytest.approx(-1.0)


def confusion_miou(pred, gt, C):
    ious = []
    for c in range(C):
        inter = np.sum((pred == c) & (gt == c))
        union = np.sum((pred == c) | (gt == c))
        if union:
            ious.append(inter / union)
    return np.mean(ious)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_miou_matches_per_class_oracle(seed, C):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, C, (7, 9))
    gt = rng.integers(0, C, (7, 9)).astype(np.uint8)
    assert miou(pred, gt, C) == pytest.approx(confusion_miou(pred, gt, C))


def test_miou_ignores_unlabeled():
    gt = np.array([[0, 1, 255]], np.uint8)
    assert miou(np.array([[0, 1, 0]]), gt, 2) == 1.0
    assert miou(np.zeros((1, 1), int), np.full((1, 1), 255, np.uint8), 2) is None


# -- point clouds -------------------------------------------------------------------

def brute_nearest(a, b):
    return np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(axis=1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_nearest_and_hausdorff_match_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
    np.testing.assert_allclose(nearest_distances(a, b), brute_nearest(a, b), rtol=1e-12)
    h = max(brute_nearest(a, b).max(), brute_nearest(b, a).max())
    assert hausdorff(a, b) == pytest.approx(h, rel=1e-12)
    assert hausdorff(b, a) == hausdorff(a, b)


def test_zscore_outliers_oracle():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(60, 3))
    pred = gt[:30] + rng.normal(scale=0.05, size=(30, 3))
    d = brute_nearest(pred, gt)
    rep = zscore_outliers(pred, gt, tau=0.5)
    assert rep.mean == pytest.approx(d.mean()) and rep.std == pytest.approx(d.std())
    assert rep.radio == pytest.approx(np.mean(np.abs(d - d.mean()) / d.std() > 0.5))
    assert 0 <= rep.radio <= 1 and not rep.degenerate


def test_zscore_identical_clouds_degenerate(caplog):
    pts = np.random.default_rng(3).normal(size=(10, 3))
    with caplog.at_level(logging.WARNING):
        rep = zscore_outliers(pts, pts)
    assert rep.degenerate and rep.radio == 0.0 and rep.hausdorff == 0.0
    assert "equal" in caplog.text


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        nearest_distances(np.zeros((0, 3)), np.ones((2, 3)))


def sampling_scene():
    s = Scene.zeros(2, 0)
    s.means[:] = [[0, 0, 0], [10, 0, 0]]
    s.log_scales[:] = np.log([[1.0, 0.5, 0.25], [0.1, 0.1, 0.1]])
    s.opacity_logits[:] = logit(np.array([0.6, 0.2]))
    return s


def test_sampled_points_lie_in_ellipsoids_with_opacity_weights():
    s = sampling_scene()
    pts = sample_scene_points(s, 20000, seed=0)
    first = pts[:, 0] < 5
    assert np.mean(first) == pytest.approx(0.75, abs=0.01)
    local = pts[first] / [1.0, 0.5, 0.25]
    assert np.all(np.linalg.norm(local, axis=1) <= 1 + 1e-12)
    # uniform in the ball: E|x|^2 = 3/5
    assert np.mean(np.sum(local ** 2, axis=1)) == pytest.approx(0.6, abs=0.01)


def test_sampling_region_and_determinism():
    s = sampling_scene()
    a = sample_scene_points(s, 500, seed=4)
    assert np.array_equal(a, sample_scene_points(s, 500, seed=4))
    r = sample_scene_points(s, 500, region=([-2, -2, -2], [2, 2, 2]), seed=4)
    assert np.array_equal(r, a[np.all(np.abs(a) <= 2, axis=1)])
    assert sample_scene_points(Scene.zeros(0, 0), 10).shape == (0, 3)


def test_evaluate_scene_reports_all_metrics(tiny_dataset):
    from multisplat.trainer import init_scene
    s = init_scene(tiny_dataset.points, tiny_dataset.colors, tiny_dataset.num_classes)
    rep = evaluate_scene(s, tiny_dataset, "test")
    assert rep.count == len(s)
    for k in ("psnr", "ssim", "abs_rel", "rmse", "cos_simi", "miou"):
        assert np.isfinite(getattr(rep, k)), k
    with pytest.raises(ValueError, match="val"):
        evaluate_scene(s, tiny_dataset, "val")
