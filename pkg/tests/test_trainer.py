import numpy as np
import pytest

from multisplat.config import TrainConfig
from multisplat.io import load_scene_ply
from multisplat.scene import GradientBuffer, Scene, SH_C0, logit
from multisplat.trainer import (AdamState, TrainingHalted, adam_step, compute_step, init_scene, prune,
                                prune_mask, train, view_schedule)


# -- initialization -------------------------------------------------------------

def test_init_single_point():
    s = init_scene(np.array([[1.0, 2.0, 3.0]]), np.array([[0.5, 0.5, 0.5]]), 2)
    assert len(s) == 1
    np.testing.assert_array_equal(s.means[0], [1, 2, 3])


def test_init_grid_scale_equals_spacing():
    h = 0.07
    g = np.stack(np.meshgrid(*(np.arange(6) * h,) * 3, indexing="ij"), -1).reshape(-1, 3)
    s = init_scene(g, None, 0)
    interior = np.all((g > h / 2) & (g < 5 * h - h / 2), axis=1)
    np.testing.assert_allclose(np.exp(s.log_scales[interior]), h, rtol=1e-12)


def test_init_defaults():
    rng = np.random.default_rng(0)
    pts, cols = rng.normal(size=(20, 3)), rng.uniform(size=(20, 3))
    s = init_scene(pts, cols, 3)
    np.testing.assert_allclose(s.sh[:, 0] * SH_C0 + 0.5, cols)
    assert not s.sh[:, 1:].any() and not s.semantics.any()
    np.testing.assert_array_equal(s.quats, np.tile([1.0, 0, 0, 0], (20, 1)))
    np.testing.assert_allclose(s.opacity_logits, logit(0.1))
    np.testing.assert_array_equal(s.grad_factor, 0.9)


def test_init_empty_rejected():
    with pytest.raises(ValueError):
        init_scene(np.zeros((0, 3)), None, 0)


# -- Adam -------------------------------------------------------------------------

LRS = {"position": 0.1, "rotation": 0.1, "scale": 0.1, "opacity": 0.1, "sh": 0.1, "semantics": 0.1, "k": 0.1}


def test_adam_zero_grads_leave_parameters():
    rng = np.random.default_rng(1)
    s = init_scene(rng.normal(size=(5, 3)), None, 2)
    before = s.copy()
    adam_step(s, GradientBuffer.zeros_like(s), AdamState.zeros(s), LRS)
    for n, a in s.params().items():
        np.testing.assert_array_equal(a, getattr(before, n))


def test_adam_scalar_quadratic_hand_oracle():
    # f(x) = (x - 3)^2 on one k value, three steps computed by hand
    s = Scene.zeros(1, 0)
    s.grad_factor[0] = 0.0
    st = AdamState.zeros(s)
    x, m, v = 0.0, 0.0, 0.0
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-15
    for t in range(1, 4):
        g = 2 * (x - 3)
        buf = GradientBuffer.zeros_like(s)
        buf.grad_factor[0] = 2 * (s.grad_factor[0] - 3)
        adam_step(s, buf, st, {**LRS, "k": lr})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert s.grad_factor[0] == pytest.approx(x, abs=1e-15)


def test_adam_first_step_magnitude_is_lr():
    rng = np.random.default_rng(2)
    s = init_scene(rng.normal(size=(4, 3)), None, 0)
    buf = GradientBuffer.zeros_like(s)
    buf.means[:] = rng.normal(size=(4, 3))
    before = s.means.copy()
    adam_step(s, buf, AdamState.zeros(s), LRS)
    np.testing.assert_allclose(np.abs(s.means - before), 0.1, rtol=1e-9)


# -- pruning ------------------------------------------------------------------------

def k_scene(ks):
    s = Scene.zeros(len(ks), 1)
    s.grad_factor[:] = ks
    s.means[:, 0] = np.arange(len(ks))
    return s


def test_prune_none_when_k_is_one():
    s, _, removed = prune(k_scene([1.0] * 4), None, 0.5)
    assert removed == 0 and len(s) == 4
    np.testing.assert_array_equal(s.grad_factor, 0.9)


def test_prune_threshold_example():
    s, _, removed = prune(k_scene([0.9, 1.0, 1.8, 0.2]), None, 0.5)
    assert removed == 2
    np.testing.assert_array_equal(s.means[:, 0], [0, 1])


def test_prune_inverted_rule():
    assert prune_mask(k_scene([0.9, 1.0, 1.8, 0.2]), 0.5, inverted=True).tolist() == [True, True, False, False]


def test_prune_unseen_mask():
    unseen = np.array([False, True, False, False])
    s, _, removed = prune(k_scene([0.9, 0.9, 0.9, 1.7]), None, 0.5, unseen=unseen)
    assert removed == 2
    np.testing.assert_array_equal(s.means[:, 0], [0, 2])


def test_prune_keeps_moments_aligned():
    rng = np.random.default_rng(3)
    s = k_scene(rng.uniform(0, 2, 30))
    st = AdamState.zeros(s)
    for n in st.m:
        st.m[n][:] = np.arange(30).reshape((30,) + (1,) * (st.m[n].ndim - 1))
        st.v[n][:] = -st.m[n]
    keep = ~prune_mask(s, 0.5)
    s2, st2, _ = prune(s, st, 0.5)
    ids = np.flatnonzero(keep)
    np.testing.assert_array_equal(s2.means[:, 0], ids)
    for n in st2.m:
        np.testing.assert_array_equal(st2.m[n].reshape(len(ids), -1)[:, 0], ids)
        np.testing.assert_array_equal(st2.v[n].reshape(len(ids), -1)[:, 0], -ids)


def test_prune_preserves_survivors_bitwise():
    rng = np.random.default_rng(4)
    s = Scene.zeros(10, 2)
    for n, a in s.params().items():
        a[:] = rng.normal(size=a.shape)
    s.grad_factor[:] = [0.9, 2.0, 1.1, 0.3, 1.0, 0.95, 1.6, 0.8, 1.2, 0.99]
    keep = np.abs(s.grad_factor - 1) <= 0.5
    s2, _, _ = prune(s, None, 0.5)
    for n in ("means", "quats", "log_scales", "opacity_logits", "sh", "semantics"):
        assert getattr(s2, n).tobytes() == getattr(s, n)[keep].tobytes()
    assert (s2.grad_factor == 0.9).all()


def test_prune_is_idempotent_after_reset():
    s, _, _ = prune(k_scene([0.9, 2.0, 1.1]), None, 0.5)
    s2, _, removed = prune(s, None, 0.5)
    assert removed == 0 and s2.means.tobytes() == s.means.tobytes()


def test_prune_everything_rejected():
    with pytest.raises(ValueError, match="remove all"):
        prune(k_scene([2.0, 3.0]), None, 0.5)


# -- loop ---------------------------------------------------------------------------

def test_view_schedule_covers_views_each_pass():
    order = view_schedule(5, 23, seed=3)
    assert len(order) == 23
    for p in range(4):
        assert sorted(order[5 * p:5 * p + 5]) == list(range(5))
    assert order == view_schedule(5, 23, seed=3)


def test_zero_iterations_leave_scene(tiny_dataset):
    s0 = init_scene(tiny_dataset.points, tiny_dataset.colors, tiny_dataset.num_classes)
    res = train(tiny_dataset, TrainConfig(iterations=0), scene=s0)
    assert res.log == []
    for n, a in res.scene.params().items():
        assert a.tobytes() == getattr(s0, n).tobytes()


def test_rgb_only_weights_reduce_to_rgb_training(tiny_dataset):
    cfg = TrainConfig(loss_weights=(1, 0, 0, 0, 0, 0))
    s = init_scene(tiny_dataset.points, tiny_dataset.colors, tiny_dataset.num_classes, cfg)
    r = compute_step(s, tiny_dataset, 0, cfg).report
    assert r.l1 > 0 and r.ssim == r.normal == r.depth == r.seg == r.k == 0
    assert r.combined == r.l1
    g = compute_step(s, tiny_dataset, 0, cfg).grads
    assert not g.semantics.any() and not g.grad_factor.any()


def test_short_run_reduces_loss_and_logs(tiny_dataset):
    cfg = TrainConfig(iterations=30, prune_interval=20)
    res = train(tiny_dataset, cfg, timing=False)
    assert len(res.log) == 30
    assert res.log[-1]["combined"] < res.log[0]["combined"]
    assert [p[0] for p in res.pruned] == [20]
    assert set(res.log[0]) == {"iter", "view", "l1", "ssim", "normal", "depth", "seg", "k", "combined",
                               "count", "pruned"}
    assert res.log[-1]["count"] == len(res.scene)


def test_training_is_deterministic(tiny_dataset):
    cfg = TrainConfig(iterations=8, prune_interval=5)
    a = train(tiny_dataset, cfg, timing=False)
    b = train(tiny_dataset, cfg, timing=False)
    assert a.log == b.log
    for n, arr in a.scene.params().items():
        assert arr.tobytes() == getattr(b.scene, n).tobytes()


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_overflow_halts_with_last_good_checkpoint(tiny_dataset, tmp_path):
    cfg = TrainConfig(iterations=5, lr={"position": 1e308})
    with pytest.raises(TrainingHalted) as exc:
        train(tiny_dataset, cfg, out_dir=tmp_path)
    assert exc.value.iteration <= 5
    saved = load_scene_ply(tmp_path / "last_good.ply")
    assert np.isfinite(saved.means).all()


def test_non_finite_loss_halts(tiny_dataset, tmp_path, monkeypatch):
    import multisplat.trainer as T
    real = T.compute_step
    calls = {"n": 0}

    def flaky(*a, **k):
        out = real(*a, **k)
        calls["n"] += 1
        if calls["n"] == 3:
            out.report.combined = float("nan")
        return out

    monkeypatch.setattr(T, "compute_step", flaky)
    with pytest.raises(TrainingHalted, match="iteration 3"):
        train(tiny_dataset, TrainConfig(iterations=5), out_dir=tmp_path)
    assert (tmp_path / "last_good.ply").exists()
