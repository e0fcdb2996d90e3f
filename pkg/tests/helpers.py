"""Scene and camera generators shared by the test modules."""

import numpy as np

from multisplat.camera import CameraView
from multisplat.scene import Scene


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n=200, num_classes=3, depth=4.0, spread=1.5, scale=(0.05, 0.4), sh_degree=2):
    """Random Gaussians in a slab in front of a camera at the origin looking down +z."""
    s = Scene.zeros(n, num_classes, sh_degree)
    s.means[:] = rng.uniform(-spread, spread, (n, 3))
    s.means[:, 2] = depth + rng.uniform(-1.0, 1.0, n)
    s.quats[:] = random_quats(rng, n)
    s.log_scales[:] = np.log(rng.uniform(*scale, (n, 3)))
    s.opacity_logits[:] = rng.uniform(-2.0, 3.0, n)
    s.sh[:] = rng.normal(scale=0.4, size=s.sh.shape)
    s.semantics[:] = rng.normal(size=s.semantics.shape)
    s.grad_factor[:] = rng.uniform(0.5, 1.5, n)
    return s


def front_view(size=32, fov=60.0, eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 4.0)):
    return CameraView.look_at(eye, target, [0, -1, 0], size, size, fov)


def identity_view(w=16, h=16, f=16.0):
    return CameraView(f, f, w / 2, h / 2, w, h)
