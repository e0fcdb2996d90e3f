"""Independent reference implementations used to check the fast paths.

``brute_force_render`` tests every Gaussian against every pixel with the
scalar geometry from :mod:`camera` and never tiles. ``finite_diff`` is a plain
central-difference gradient. The synthetic scene generators ray-cast analytic
planes and spheres to produce exact ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import camera as cam
from .normals import pixel_rays
from .raster import MultimodalFrame, RenderConfig
from .scene import Scene
from .sh import eval_sh


def brute_force_render(scene: Scene, view: cam.CameraView, cfg: RenderConfig | None = None,
                       trace: bool = False):
    """Untiled per-pixel renderer.

    With ``trace=True`` also returns a hashable signature of every discrete
    decision taken (which Gaussians blend where, alpha clamping, ray hits,
    color clamping, early termination). Finite differences are only
    meaningful while this signature stays fixed.
    """
    cfg = cfg or RenderConfig()
    H, W, n = view.height, view.width, len(scene)
    bg = np.asarray(cfg.background, float)
    gs = [scene.activated(i) for i in range(n)]
    splats = [cam.project_gaussian(g, view) for g in gs]

    raw_color = np.zeros((n, 3))
    if n:
        dirs = scene.means - view.center
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        raw_color = eval_sh(scene.sh, dirs)
    color = np.maximum(raw_color, 0.0)

    # alpha images, one Gaussian at a time
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    alpha_img = np.zeros((n, H, W))
    raw_img = np.zeros((n, H, W))
    for i, (g, sp) in enumerate(zip(gs, splats)):
        if sp is None:
            continue
        Q = np.linalg.inv(sp.cov)
        dx, dy = uu - sp.center[0], vv - sp.center[1]
        raw_img[i] = g.alpha * np.exp(-0.5 * (Q[0, 0] * dx * dx + 2 * Q[0, 1] * dx * dy + Q[1, 1] * dy * dy))
        alpha_img[i] = np.minimum(cam.ALPHA_MAX, raw_img[i])
    order = sorted((sp.sort_depth, i) for i, sp in enumerate(splats) if sp is not None)
    order = [i for _, i in order]

    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    O = np.zeros((H, W, scene.num_classes))
    Kmap = np.zeros((H, W))
    T_img = np.ones((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    weight_sum = np.zeros(n)
    sig = []
    for v in range(H):
        for u in range(W):
            origin, direction = cam.compute_ray(view, u + 0.5, v + 0.5)
            T = 1.0
            steps = []
            for i in order:
                a = alpha_img[i, v, u]
                if a < cam.ALPHA_MIN:
                    continue
                hit = cam.intersect(gs[i], origin, direction, cfg.sigma_scale)
                if hit is not None:
                    d = cam.midpoint_depth(view, origin, direction, hit.t_mid)
                else:
                    d = splats[i].sort_depth
                w = a * T
                C[v, u] += color[i] * w
                D[v, u] += d * w
                O[v, u] += gs[i].o * w
                Kmap[v, u] += gs[i].k * w
                weight_sum[i] += w
                T *= 1.0 - a
                count[v, u] += 1
                steps.append((i, hit is not None, bool(raw_img[i, v, u] >= cam.ALPHA_MAX)))
                if T < cfg.min_transmittance:
                    steps.append((i, "stop"))
                    break
            C[v, u] += bg * T
            T_img[v, u] = T
            sig.append(tuple(steps))
    frame = MultimodalFrame(C, D, O, Kmap, T_img, count, weight_sum)
    if not trace:
        return frame
    culled = tuple(sp is None for sp in splats)
    clamped = tuple(map(tuple, (raw_color < 0).tolist()))
    return frame, (tuple(sig), culled, clamped)


def alpha_margin(scene: Scene, view: cam.CameraView) -> float:
    """Smallest relative distance of any pixel alpha to the skip/clamp cutoffs.

    Small values mean a finite-difference step may flip a discrete decision.
    """
    margin = np.inf
    for i in range(len(scene)):
        g = scene.activated(i)
        sp = cam.project_gaussian(g, view)
        if sp is None:
            continue
        Q = np.linalg.inv(sp.cov)
        uu, vv = np.meshgrid(np.arange(view.width) + 0.5, np.arange(view.height) + 0.5)
        dx, dy = uu - sp.center[0], vv - sp.center[1]
        a = g.alpha * np.exp(-0.5 * (Q[0, 0] * dx * dx + 2 * Q[0, 1] * dx * dy + Q[1, 1] * dy * dy))
        for cut in (cam.ALPHA_MIN, cam.ALPHA_MAX):
            margin = min(margin, float(np.min(np.abs(a - cut) / cut)))
    return margin


def finite_diff(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(theta)
        flat[i] = old - eps
        fm = f(theta)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a − n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, float)
    b = np.asarray(numeric, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# -- analytic synthetic scenes ------------------------------------------------

@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray
    label: int


@dataclass
class AnalyticScene:
    """Textured plane z = 0 (normal +z) plus spheres in front of it."""

    spheres: list[Sphere]
    plane_label: int = 0
    phase: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def plane_color(self, p: np.ndarray) -> np.ndarray:
        x, y = p[..., 0], p[..., 1]
        ph = self.phase
        return np.stack([0.5 + 0.25 * np.sin(1.3 * x + ph[0]) * np.cos(0.7 * y + ph[3]),
                         0.5 + 0.25 * np.sin(1.1 * y + ph[1]),
                         0.45 + 0.2 * np.cos(0.9 * (x - y) + ph[2])], axis=-1)

    def sphere_color(self, s: Sphere, p: np.ndarray) -> np.ndarray:
        n = (p - s.center) / s.radius
        wave = 0.12 * np.sin(2.5 * n[..., 0] + 1.7 * n[..., 1] + self.phase[4 + s.label % 2])
        return np.clip(s.color + wave[..., None], 0.0, 1.0)

    def cast(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest hit along unit rays: (t, outward normal, label, color); t = inf on a miss."""
        shape = dirs.shape[:-1]
        t = np.full(shape, np.inf)
        normal = np.zeros(shape + (3,))
        label = np.full(shape, 255, dtype=np.uint8)
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = -origin[2] / dirs[..., 2]
        hit = np.isfinite(tp) & (tp > 0)
        t[hit] = tp[hit]
        normal[hit] = (0.0, 0.0, 1.0)
        label[hit] = self.plane_label
        which = np.full(shape, -1)
        for k, s in enumerate(self.spheres):
            oc = origin - s.center
            b = dirs @ oc
            c = oc @ oc - s.radius ** 2
            disc = b * b - c
            ts = -b - np.sqrt(np.maximum(disc, 0.0))
            closer = (disc >= 0) & (ts > 0) & (ts < t)
            t[closer] = ts[closer]
            label[closer] = s.label
            which[closer] = k
        p = origin + t[..., None] * dirs
        color = np.zeros(shape + (3,))
        on_plane = np.isfinite(t) & (which < 0)
        color[on_plane] = self.plane_color(p[on_plane])
        for k, s in enumerate(self.spheres):
            m = which == k
            normal[m] = (p[m] - s.center) / s.radius
            color[m] = self.sphere_color(s, p[m])
        return t, normal, label, color

    def render_gt(self, view: cam.CameraView, edge_band: int = 4):
        """Ground-truth rgb, camera-z depth, oriented normals and labels.

        Normals follow the estimator's orientation (N . d_view <= 0) and are
        zeroed within ``edge_band`` pixels (along rows/columns) of a label
        change, where depth-derived normals straddle two surfaces.
        """
        rays = pixel_rays(view)
        dirs = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
        t, normal, label, color = self.cast(view.t, dirs)
        depth = np.where(np.isfinite(t), t * (dirs @ view.R[:, 2]), 0.0)
        facing = np.einsum("hwc,hwc->hw", normal, -dirs)  # outward normal . d_view
        normal = np.where((facing > 0)[..., None], -normal, normal)
        edge = np.zeros(label.shape, dtype=bool)
        for s in range(1, edge_band + 1):
            for dv, du in ((0, s), (0, -s), (s, 0), (-s, 0)):
                shifted = np.full_like(label, 254)
                H, W = label.shape
                sv = slice(max(0, dv), H + min(0, dv))
                su = slice(max(0, du), W + min(0, du))
                tv = slice(max(0, -dv), H - max(0, dv))
                tu = slice(max(0, -du), W - max(0, du))
                shifted[tv, tu] = label[sv, su]
                edge |= (shifted != label) & (shifted != 254)
        normal[edge | ~np.isfinite(t)] = 0.0
        return color, depth, normal, label

    def sample_points(self, spacing: float, extent, rng) -> tuple[np.ndarray, np.ndarray]:
        """Surface points roughly ``spacing`` apart, with their colors."""
        (x0, x1), (y0, y1) = extent
        xs = np.arange(x0, x1 + 1e-9, spacing)
        ys = np.arange(y0, y1 + 1e-9, spacing)
        gx, gy = np.meshgrid(xs, ys)
        plane = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        plane[:, :2] += rng.uniform(-0.25, 0.25, (len(plane), 2)) * spacing
        pts = [plane]
        cols = [self.plane_color(plane)]
        for s in self.spheres:
            m = max(8, int(4 * np.pi * s.radius ** 2 / spacing ** 2))
            i = np.arange(m) + 0.5
            phi = np.arccos(1 - 2 * i / m)
            theta = np.pi * (1 + 5 ** 0.5) * i
            unit = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
            p = s.center + s.radius * unit
            pts.append(p)
            cols.append(self.sphere_color(s, p))
        return np.concatenate(pts), np.concatenate(cols)


def arc_views(n: int, radius: float, height: float, target, span_deg: float, size: int,
              fov_deg: float = 60.0, offset: float = 0.0) -> list[cam.CameraView]:
    angles = np.radians(np.linspace(-span_deg / 2, span_deg / 2, n) + offset)
    views = []
    for a in angles:
        eye = np.array([radius * np.sin(a), height, radius * np.cos(a)])
        views.append(cam.CameraView.look_at(eye, target, (0.0, 1.0, 0.0), size, size, fov_deg))
    return views


def make_synthetic_scene(kind: str = "spheres-room", seed: int = 0, size: int = 64, n_train: int = 20,
                         n_test: int = 4, spacing: float = 0.12, edge_band: int = 4):
    """Ray-cast dataset with exact ground truth and an initial point cloud.

    Returns ``(SceneDataset, AnalyticScene)``. Test views interleave the
    training arc.
    """
    from .io import FrameData, SceneDataset

    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 6)
    if kind == "plane":
        scene = AnalyticScene([], 0, phase)
        num_classes = 1
        target = np.array([0.0, 0.0, 0.0])
    elif kind == "spheres-room":
        palette = np.array([[0.85, 0.3, 0.25], [0.25, 0.7, 0.35], [0.3, 0.4, 0.85]])
        spheres = []
        xs = np.array([-1.1, 0.0, 1.1]) + rng.uniform(-0.1, 0.1, 3)
        for k in range(3):
            r = rng.uniform(0.45, 0.6)
            c = np.array([xs[k], rng.uniform(-0.5, 0.5), rng.uniform(0.8, 1.4)])
            spheres.append(Sphere(c, r, palette[k], k + 1))
        scene = AnalyticScene(spheres, 0, phase)
        num_classes = 4
        target = np.array([0.0, 0.0, 0.8])
    else:
        raise ValueError(f"unknown synthetic scene kind {kind!r}")

    span = 50.0
    train_views = arc_views(n_train, 4.5, 0.6, target, span, size)
    step = span / max(n_train - 1, 1)
    test_views = arc_views(n_test, 4.5, 0.6, target, span - step, size)
    views = train_views + test_views
    frames = []
    lo = np.array([np.inf, np.inf])
    hi = -lo
    for i, v in enumerate(views):
        rgb, depth, normal, label = scene.render_gt(v, edge_band)
        if np.any(label == 255):
            raise RuntimeError("synthetic camera sees past the scene; adjust the layout")
        rays = pixel_rays(v)
        pts = v.t + rays * depth[..., None]
        plane_px = label == scene.plane_label
        lo = np.minimum(lo, pts[plane_px][:, :2].min(axis=0))
        hi = np.maximum(hi, pts[plane_px][:, :2].max(axis=0))
        split = "train" if i < n_train else "test"
        frames.append(FrameData(f"{split}_{i:03d}", split, rgb, depth, normal, label))
    extent = ((lo[0] - spacing, hi[0] + spacing), (lo[1] - spacing, hi[1] + spacing))
    points, colors = scene.sample_points(spacing, extent, rng)
    return SceneDataset(views, frames, num_classes, points, colors), scene
