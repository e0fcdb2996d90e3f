"""Normals from a depth map by two-scale central differences, and the adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView

NORM_EPS = 1e-12


@dataclass
class NormalState:
    points: np.ndarray  # (H, W, 3) world points
    steps: tuple[int, int]
    lam: float
    vx: tuple[np.ndarray, np.ndarray]
    vy: tuple[np.ndarray, np.ndarray]
    n1: np.ndarray
    n2: np.ndarray  # sign-aligned to n1
    sign: np.ndarray  # (H, W) sign(n1 . n2_raw), +1 on ties
    n_fused: np.ndarray
    norm: np.ndarray
    flip: np.ndarray  # (H, W) bool, normal was negated by the orientation rule
    valid: np.ndarray  # (H, W) bool


def pixel_rays(view: CameraView) -> np.ndarray:
    """World-frame direction (unnormalized, camera z = 1) through each pixel center."""
    u = (np.arange(view.width) + 0.5 - view.cx) / view.fx
    v = (np.arange(view.height) + 0.5 - view.cy) / view.fy
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return cam @ view.R.T


def backproject(depth: np.ndarray, view: CameraView) -> np.ndarray:
    return pixel_rays(view) * depth[..., None] + view.t


def _shift(a: np.ndarray, dv: int, du: int) -> np.ndarray:
    """``out[v, u] = a[v + dv, u + du]`` where in range, else 0."""
    out = np.zeros_like(a)
    H, W = a.shape[:2]
    dst_v = slice(max(0, -dv), H - max(0, dv))
    dst_u = slice(max(0, -du), W - max(0, du))
    src_v = slice(max(0, dv), H + min(0, dv))
    src_u = slice(max(0, du), W + min(0, du))
    out[dst_v, dst_u] = a[src_v, src_u]
    return out


def estimate_normals(depth: np.ndarray, view: CameraView, step1: int = 1, step2: int = 4,
                     lam: float = 0.5, T_final: np.ndarray | None = None,
                     mask_threshold: float = 0.5, toward_camera: bool = False) -> tuple[np.ndarray, NormalState]:
    """World-frame unit normals, zero on invalid pixels."""
    if not 0 < step1 < step2:
        raise ValueError(f"need 0 < step1 < step2, got {step1}, {step2}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"fusion weight must be in [0, 1], got {lam}")
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    P = backproject(depth, view)

    valid = np.zeros((H, W), dtype=bool)
    if H > 2 * step2 and W > 2 * step2:
        valid[step2:H - step2, step2:W - step2] = True
    if T_final is not None:
        valid &= T_final < mask_threshold
    valid &= depth > 0
    vxs, vys, ns = [], [], []
    for s in (step1, step2):
        for dv, du in ((0, s), (0, -s), (s, 0), (-s, 0)):
            valid &= _shift(depth, dv, du) > 0
        vx = _shift(P, 0, s) - _shift(P, 0, -s)
        vy = _shift(P, s, 0) - _shift(P, -s, 0)
        vxs.append(vx)
        vys.append(vy)
        ns.append(np.cross(vx, vy))
    n1, n2 = ns
    sign = np.where(np.einsum("hwc,hwc->hw", n1, n2) < 0, -1.0, 1.0)
    n2 = n2 * sign[..., None]
    n_fused = lam * n1 + (1.0 - lam) * n2
    norm = np.linalg.norm(n_fused, axis=-1)
    valid &= norm >= NORM_EPS

    N = np.zeros((H, W, 3))
    N[valid] = n_fused[valid] / norm[valid, None]
    # d_view runs from the surface point to the camera; the kept orientation
    # has N . d_view <= 0 unless toward_camera asks for the opposite
    facing = np.einsum("hwc,hwc->hw", N, view.t - P)
    flip = valid & ((facing < 0) if toward_camera else (facing > 0))
    N[flip] *= -1.0
    state = NormalState(P, (step1, step2), lam, tuple(vxs), tuple(vys), n1, n2, sign, n_fused,
                        norm, flip, valid)
    return N, state


def normals_backward(dN: np.ndarray, state: NormalState, view: CameraView) -> np.ndarray:
    """Pull dL/dN back to dL/dD for the depth map that produced ``state``."""
    valid = state.valid
    g = np.where(valid[..., None], dN, 0.0)
    g = np.where(state.flip[..., None], -g, g)
    norm = np.where(valid, state.norm, 1.0)
    unit = state.n_fused / norm[..., None]
    g = (g - unit * np.einsum("hwc,hwc->hw", unit, g)[..., None]) / norm[..., None]
    g = np.where(valid[..., None], g, 0.0)

    gP = np.zeros_like(state.points)
    weights = (state.lam, (1.0 - state.lam) * state.sign[..., None])
    for s, w, vx, vy in zip(state.steps, weights, state.vx, state.vy):
        gn = w * g
        # n = vx x vy:  dL/dvx = vy x g,  dL/dvy = g x vx
        gvx = np.cross(vy, gn)
        gvy = np.cross(gn, vx)
        gP += _shift(gvx, 0, -s) - _shift(gvx, 0, s)
        gP += _shift(gvy, -s, 0) - _shift(gvy, s, 0)
    return np.einsum("hwc,hwc->hw", gP, pixel_rays(view))
