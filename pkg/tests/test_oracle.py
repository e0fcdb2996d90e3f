import numpy as np
import pytest

from multisplat.normals import backproject
from multisplat.oracle import finite_diff, make_synthetic_scene, rel_error


def test_finite_diff_quadratic():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(finite_diff(lambda t: 0.5 * t @ A @ t, x), A @ x, rtol=1e-9)


def test_finite_diff_keeps_input():
    x = np.array([[1.0, 2.0]])
    g = finite_diff(lambda t: np.sum(np.sin(t)), x)
    np.testing.assert_array_equal(x, [[1.0, 2.0]])
    np.testing.assert_allclose(g, np.cos(x), rtol=1e-9)


def test_rel_error_floor():
    assert rel_error(1e-9, 0.0, 1e-6) == pytest.approx(1e-3)
    assert rel_error(2.0, 1.0) == pytest.approx(0.5)


@pytest.fixture(scope="module")
def spheres():
    return make_synthetic_scene(size=24, n_train=4, n_test=2, spacing=0.25)


def test_synthetic_splits_and_labels(spheres):
    ds, scene = spheres
    assert len(ds.train) == 4 and len(ds.test) == 2
    for fr in ds.frames:
        assert set(np.unique(fr.sem)) <= {0, 1, 2, 3}
        assert np.all(fr.depth > 0)


def test_synthetic_depth_lies_on_surfaces(spheres):
    ds, scene = spheres
    for view, fr in zip(ds.views, ds.frames):
        P = backproject(fr.depth, view)
        plane = fr.sem == 0
        np.testing.assert_allclose(P[plane][:, 2], 0.0, atol=1e-9)
        for s in scene.spheres:
            m = fr.sem == s.label
            np.testing.assert_allclose(np.linalg.norm(P[m] - s.center, axis=1), s.radius, rtol=1e-9)


def test_synthetic_normals_face_camera(spheres):
    ds, _ = spheres
    for view, fr in zip(ds.views, ds.frames):
        ok = np.linalg.norm(fr.normal, axis=-1) > 0
        np.testing.assert_allclose(np.linalg.norm(fr.normal[ok], axis=-1), 1.0, rtol=1e-12)
        P = backproject(fr.depth, view)
        facing = np.einsum("hwc,hwc->hw", fr.normal, view.t - P)[ok]
        assert np.all(facing <= 1e-12)


def test_plane_scene_normals_constant():
    ds, _ = make_synthetic_scene("plane", size=16, n_train=2, n_test=1, spacing=0.3, edge_band=0)
    for fr in ds.frames:
        np.testing.assert_array_equal(fr.normal.reshape(-1, 3), np.tile([0, 0, -1.0], (256, 1)))
        assert np.all(fr.sem == 0)


def test_sphere_center_depth():
    # ray through the sphere center: camera-z depth of the near surface = distance - radius
    ds, scene = make_synthetic_scene(size=24, n_train=2, n_test=1, spacing=0.3)
    s = scene.spheres[1]
    view = ds.views[0]
    dirs = np.array([[[0.0, 0.0, 0.0]]]) + (s.center - view.t) / np.linalg.norm(s.center - view.t)
    t, _, label, _ = scene.cast(view.t, dirs)
    assert label[0, 0] == s.label
    assert t[0, 0] == pytest.approx(np.linalg.norm(s.center - view.t) - s.radius, rel=1e-12)


def test_synthetic_is_seeded():
    a, _ = make_synthetic_scene(size=8, n_train=2, n_test=1, spacing=0.4, seed=5)
    b, _ = make_synthetic_scene(size=8, n_train=2, n_test=1, spacing=0.4, seed=5)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.frames[0].rgb, b.frames[0].rgb)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_synthetic_scene("teapot")
