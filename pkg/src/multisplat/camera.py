"""Pinhole cameras, pixel rays, ray-ellipsoid intersection and EWA projection.

These are the scalar, readable versions of the geometry. The tile rasterizer
carries its own compiled copies; the brute-force oracle renderer uses the ones
here, so the two paths check each other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .scene import ActivatedGaussian, rotmat_grad_to_quat

log = logging.getLogger(__name__)

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
MIN_SCALE = 1e-8
MIN_QUAD_A = 1e-12

_warned_degenerate: set[int] = set()


@dataclass
class CameraView:
    """Pinhole camera. ``R`` and ``t`` map camera-frame points to world."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(self.R) - 1) > 1e-6:
            raise ValueError("R_cam_to_world must be a proper rotation")

    @property
    def R_wc(self) -> np.ndarray:
        return self.R.T

    @property
    def t_wc(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def center(self) -> np.ndarray:
        return self.t

    def world_to_cam(self, p) -> np.ndarray:
        return np.asarray(p) @ self.R + self.t_wc  # row-vector form of R_wc p + t_wc

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg=60.0) -> "CameraView":
        """Camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
        eye = np.asarray(eye, float)
        z = np.asarray(target, float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, float))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(fx, fx, width / 2, height / 2, width, height, np.stack([x, y, z], axis=1), eye)


def compute_ray(view: CameraView, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray through image-plane point (u, v).

    ``u, v`` are continuous image coordinates; the rasterizer passes pixel
    centers ``(col + 0.5, row + 0.5)``.
    """
    d = view.R @ np.array([(u - view.cx) / view.fx, (v - view.cy) / view.fy, 1.0])
    return view.t.copy(), d / np.linalg.norm(d)


@dataclass
class RayEllipsoidHit:
    t1: float
    t2: float
    t_mid: float
    a: float
    b: float
    c: float
    v_s: np.ndarray
    d_s: np.ndarray
    v_l: np.ndarray
    d_l: np.ndarray

    @property
    def discriminant(self) -> float:
        return self.b * self.b - 4 * self.a * self.c


def intersect(g: ActivatedGaussian, origin, direction, sigma_scale: float = 1.0,
              index: int | None = None) -> RayEllipsoidHit | None:
    """Intersect a ray with the ``sigma_scale``-sigma ellipsoid of ``g``."""
    axes = sigma_scale * g.s
    if np.any(axes < MIN_SCALE):
        if index is not None and index not in _warned_degenerate:
            _warned_degenerate.add(index)
            log.warning("primitive %d has a degenerate scale %s; ray hits disabled", index, axes)
        return None
    R = g.R
    v_l = R.T @ (np.asarray(origin, float) - g.mu)
    d_l = R.T @ np.asarray(direction, float)
    v_s = v_l / axes
    d_s = d_l / axes
    a = d_s @ d_s
    b = 2.0 * v_s @ d_s
    c = v_s @ v_s - 1.0
    if a < MIN_QUAD_A:
        return None
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    t_mid = -b / (2 * a)
    if t_mid <= 0:
        return None
    root = np.sqrt(disc)
    return RayEllipsoidHit((-b - root) / (2 * a), (-b + root) / (2 * a), t_mid, a, b, c, v_s, d_s, v_l, d_l)


def midpoint_depth(view: CameraView, origin, direction, t_mid: float) -> float:
    """Camera-frame z of the point ``origin + t_mid * direction``."""
    p = np.asarray(origin, float) + t_mid * np.asarray(direction, float)
    return float(view.R_wc[2] @ p + view.t_wc[2])


@dataclass
class IntersectionGrad:
    dmu: np.ndarray
    dR: np.ndarray
    dq: np.ndarray  # w.r.t. the unit quaternion
    ds: np.ndarray  # w.r.t. the activated scale
    degenerate: bool = False


def intersection_backward(hit: RayEllipsoidHit, dL_dd: float, view: CameraView, origin, direction,
                          g: ActivatedGaussian, sigma_scale: float = 1.0) -> IntersectionGrad:
    """Gradients of ``dL_dd * depth`` w.r.t. position, rotation and scale of ``g``."""
    zero = IntersectionGrad(np.zeros(3), np.zeros((3, 3)), np.zeros(4), np.zeros(3))
    if hit.a < MIN_QUAD_A:
        zero.degenerate = True
        return zero
    if dL_dd == 0.0:
        return zero
    direction = np.asarray(direction, float)
    a, b = hit.a, hit.b
    g_t = dL_dd * (view.R_wc[2] @ direction)
    g_vs = g_t * (-hit.d_s / a)
    g_ds = g_t * ((b / (a * a)) * hit.d_s - hit.v_s / a)
    axes = sigma_scale * g.s
    g_vl = g_vs / axes
    g_dl = g_ds / axes
    g_axes = -(g_vs * hit.v_s + g_ds * hit.d_s) / axes
    R = g.R
    v = np.asarray(origin, float) - g.mu
    dmu = -R @ g_vl
    dR = np.outer(v, g_vl) + np.outer(direction, g_dl)
    return IntersectionGrad(dmu, dR, rotmat_grad_to_quat(g.q, dR), sigma_scale * g_axes)


@dataclass
class Splat2D:
    center: np.ndarray
    cov: np.ndarray
    sort_depth: float
    radius: float

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov)


def cov3d(g: ActivatedGaussian) -> np.ndarray:
    M = g.R * g.s  # R @ diag(s)
    return M @ M.T


def project_gaussian(g: ActivatedGaussian, view: CameraView) -> Splat2D | None:
    """EWA projection of ``g``; ``None`` when the center is behind the near plane."""
    tc = view.R_wc @ g.mu + view.t_wc
    x, y, z = tc
    if z <= NEAR_PLANE:
        return None
    J = np.array([[view.fx / z, 0.0, -view.fx * x / (z * z)],
                  [0.0, view.fy / z, -view.fy * y / (z * z)]])
    T = J @ view.R_wc
    cov = T @ cov3d(g) @ T.T + COV2D_FLOOR * np.eye(2)
    center = np.array([view.fx * x / z + view.cx, view.fy * y / z + view.cy])
    radius = 3.0 * np.sqrt(np.linalg.eigvalsh(cov)[-1])
    return Splat2D(center, cov, float(z), float(radius))


def support_radius(splat: Splat2D, alpha: float) -> float:
    """Pixel radius outside of which ``eval_alpha`` always skips."""
    if alpha * 255.0 <= 1.0:
        return 0.0
    return float(np.sqrt(2.0 * np.log(255.0 * alpha)) * np.sqrt(np.linalg.eigvalsh(splat.cov)[-1]))


def eval_alpha(splat: Splat2D, alpha: float, u: float, v: float) -> float | None:
    """Gaussian falloff at image point (u, v); ``None`` means skip."""
    delta = np.array([u, v]) - splat.center
    power = 0.5 * delta @ splat.conic @ delta
    a = min(ALPHA_MAX, alpha * np.exp(-power))
    if a < ALPHA_MIN:
        return None
    return a
