"""Tile-based multimodal rasterizer: forward blend and reverse-order backward pass."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .camera import CameraView, Splat2D
from .scene import PARAM_NAMES, GradientBuffer, Scene

TILE = K.TILE


@dataclass
class RenderConfig:
    sigma_scale: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    # Let the depth loss also move opacity and the 2D footprint. Turning this
    # off restricts depth gradients to the ray-ellipsoid path (mu, q, s).
    depth_grad_to_alpha: bool = True
    # stop blending a pixel once its transmittance falls below this
    min_transmittance: float = 1e-4

    def __post_init__(self):
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")
        if len(self.background) != 3:
            raise ValueError("background must have 3 channels")


@dataclass
class TileBins:
    """Tile lists flattened into one array.

    ``ids[ranges[t, 0]:ranges[t, 1]]`` are the primitive indices touching tile
    ``t`` (row-major tile order), front to back.
    """

    width: int
    height: int
    tiles_x: int
    tiles_y: int
    ids: np.ndarray
    ranges: np.ndarray
    tile_size: int = TILE

    def tile(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.ids[self.ranges[t, 0]:self.ranges[t, 1]]


@dataclass
class MultimodalFrame:
    """Per-pixel render buffers, all indexed [row, col]."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    semantics: np.ndarray  # (H, W, C_o)
    k_map: np.ndarray  # (H, W)
    T_final: np.ndarray  # (H, W)
    count: np.ndarray  # (H, W) number of blended contributors
    weight_sum: np.ndarray  # (N,) total blending weight per primitive
    normals: np.ndarray | None = None  # (H, W, 3), filled by the normal pipeline

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class PixelGradients:
    color: np.ndarray
    depth: np.ndarray
    semantics: np.ndarray
    k_map: np.ndarray

    @classmethod
    def zeros(cls, frame: MultimodalFrame) -> "PixelGradients":
        return cls(np.zeros_like(frame.color), np.zeros_like(frame.depth),
                   np.zeros_like(frame.semantics), np.zeros_like(frame.k_map))


@dataclass
class Projected:
    """Per-primitive quantities computed once per view."""

    valid: np.ndarray
    depth: np.ndarray
    tcam: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    radius: np.ndarray
    color: np.ndarray
    clamped: np.ndarray
    opacity: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    qn: np.ndarray
    vs: np.ndarray
    inv_axes: np.ndarray
    hit_ok: np.ndarray


@dataclass
class ReplayState:
    """Everything the backward pass needs from the matching forward call."""

    view: CameraView
    cfg: RenderConfig
    proj: Projected
    bins: TileBins
    last: np.ndarray
    fingerprint: int
    extras: dict = field(default_factory=dict)


def scene_fingerprint(scene: Scene) -> int:
    crc = len(scene)
    for name in PARAM_NAMES:
        crc = zlib.crc32(getattr(scene, name).tobytes(), crc)
    return crc


def project_scene(scene: Scene, view: CameraView, sigma_scale: float = 1.0) -> Projected:
    out = K.preprocess(scene.means, scene.quats, scene.log_scales, scene.opacity_logits, scene.sh,
                       np.ascontiguousarray(view.R_wc), view.t_wc, view.center,
                       float(view.fx), float(view.fy), float(view.cx), float(view.cy), float(sigma_scale))
    return Projected(*out)


def _bins_from_arrays(valid, mean2d, radius, depth, width, height) -> TileBins:
    tiles, gids, ntx, nty = K.tile_entries(valid, mean2d, radius, width, height)
    order = np.lexsort((gids, depth[gids], tiles))
    tiles, gids = tiles[order], gids[order]
    ntiles = ntx * nty
    starts = np.searchsorted(tiles, np.arange(ntiles), side="left")
    ends = np.searchsorted(tiles, np.arange(ntiles), side="right")
    return TileBins(width, height, ntx, nty, np.ascontiguousarray(gids),
                    np.ascontiguousarray(np.stack([starts, ends], axis=1).astype(np.int64)))


def bin_and_sort(splats: list[Splat2D | None], width: int, height: int) -> TileBins:
    """Bin splats by the tiles their bounding radius reaches.

    ``None`` entries (culled primitives) keep their index but are never binned.
    """
    n = len(splats)
    valid = np.array([s is not None for s in splats], dtype=bool)
    mean2d = np.zeros((n, 2))
    radius = np.zeros(n)
    depth = np.zeros(n)
    for i, s in enumerate(splats):
        if s is not None:
            mean2d[i] = s.center
            radius[i] = s.radius
            depth[i] = s.sort_depth
    return _bins_from_arrays(valid, mean2d, radius, depth, width, height)


def _frame_check(frame: MultimodalFrame, proj: Projected, bins: TileBins) -> None:
    bad = ~(np.isfinite(frame.color).all(-1) & np.isfinite(frame.depth)
            & np.isfinite(frame.semantics).all(-1) & np.isfinite(frame.k_map))
    if bad.any():
        v, u = (int(x) for x in np.argwhere(bad)[0])
        ids = bins.tile(u // TILE, v // TILE)
        culprit = [int(g) for g in ids if not (np.isfinite(proj.mean2d[g]).all()
                                             and np.isfinite(proj.conic[g]).all()
                                             and np.isfinite(proj.color[g]).all())]
        who = f", primitive {culprit[0]}" if culprit else ""
        raise FloatingPointError(f"non-finite render output at pixel (row {v}, col {u}){who}")


def rasterize(scene: Scene, view: CameraView, cfg: RenderConfig | None = None
              ) -> tuple[MultimodalFrame, ReplayState]:
    cfg = cfg or RenderConfig()
    scene.check_finite()
    W, H = view.width, view.height
    proj = project_scene(scene, view, cfg.sigma_scale)
    bins = _bins_from_arrays(proj.valid, proj.mean2d, proj.radius, proj.depth, W, H)

    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    O = np.zeros((H, W, scene.num_classes))
    Kmap = np.zeros((H, W))
    T = np.ones((H, W))
    last = np.zeros((H, W), dtype=np.int64)
    count = np.zeros((H, W), dtype=np.int64)
    ent_w = np.zeros(bins.ids.shape[0])
    bg = np.asarray(cfg.background, dtype=np.float64)
    K.render_forward(bins.ids, bins.ranges, W, H, bins.tiles_x,
                     float(view.fx), float(view.fy), float(view.cx), float(view.cy),
                     np.ascontiguousarray(view.R), proj.mean2d, proj.conic, proj.opacity, proj.color,
                     scene.semantics, scene.grad_factor, proj.depth, proj.rot, proj.vs, proj.inv_axes,
                     proj.hit_ok, bg, float(cfg.min_transmittance), C, D, O, Kmap, T, last, count, ent_w)
    weight_sum = np.zeros(len(scene))
    K.reduce_entries(bins.ids, ent_w, weight_sum)
    frame = MultimodalFrame(C, D, O, Kmap, T, count, weight_sum)
    _frame_check(frame, proj, bins)
    return frame, ReplayState(view, cfg, proj, bins, last, scene_fingerprint(scene))


def rasterize_backward(scene: Scene, view: CameraView, frame: MultimodalFrame, replay: ReplayState,
                       pix: PixelGradients) -> GradientBuffer:
    """Gradients w.r.t. activated parameters (see ``chain_activations``)."""
    if replay.fingerprint != scene_fingerprint(scene) or replay.view is not view:
        raise ValueError("replay state does not match this scene/view; re-run rasterize")
    H, W = frame.depth.shape
    for name, arr, shape in (("color", pix.color, (H, W, 3)), ("depth", pix.depth, (H, W)),
                             ("semantics", pix.semantics, (H, W, scene.num_classes)),
                             ("k_map", pix.k_map, (H, W))):
        if arr.shape != shape:
            raise ValueError(f"pixel gradient {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            v, u = np.argwhere(~np.isfinite(arr.reshape(H, W, -1)).all(-1))[0]
            raise FloatingPointError(f"non-finite dL/d{name} at pixel (row {v}, col {u})")

    proj, bins = replay.proj, replay.bins
    n, E, nc = len(scene), bins.ids.shape[0], scene.num_classes
    e_color = np.zeros((E, 3))
    e_sem = np.zeros((E, nc))
    e_k = np.zeros(E)
    e_op = np.zeros(E)
    e_mean2d = np.zeros((E, 2))
    e_conic = np.zeros((E, 3))
    e_mu = np.zeros((E, 3))
    e_R = np.zeros((E, 3, 3))
    e_s = np.zeros((E, 3))
    R_wc = np.ascontiguousarray(view.R_wc)
    K.render_backward(bins.ids, bins.ranges, W, H, bins.tiles_x,
                      float(view.fx), float(view.fy), float(view.cx), float(view.cy),
                      np.ascontiguousarray(view.R), view.center, np.ascontiguousarray(R_wc[2]),
                      proj.mean2d, proj.conic, proj.opacity, proj.color, scene.semantics,
                      scene.grad_factor, proj.depth, proj.rot, proj.vs, proj.inv_axes, proj.hit_ok,
                      np.asarray(replay.cfg.background, dtype=np.float64),
                      float(replay.cfg.sigma_scale), bool(replay.cfg.depth_grad_to_alpha),
                      frame.T_final, replay.last,
                      np.ascontiguousarray(pix.color, dtype=np.float64),
                      np.ascontiguousarray(pix.depth, dtype=np.float64),
                      np.ascontiguousarray(pix.semantics, dtype=np.float64),
                      np.ascontiguousarray(pix.k_map, dtype=np.float64),
                      e_color, e_sem, e_k, e_op, e_mean2d, e_conic, e_mu, e_R, e_s)

    def reduce(ent, shape):
        out = np.zeros(shape)
        K.reduce_entries(bins.ids, ent, out)
        return out

    g_color = reduce(e_color, (n, 3))
    g_sem = reduce(e_sem, (n, nc))
    g_k = reduce(e_k, n)
    g_op = reduce(e_op, n)
    g_mean2d = reduce(e_mean2d, (n, 2))
    g_conic = reduce(e_conic, (n, 3))
    g_mu = reduce(e_mu, (n, 3))
    g_R = reduce(e_R, (n, 3, 3))
    g_s = reduce(e_s, (n, 3))
    g_sh = np.zeros_like(scene.sh)
    g_q = np.zeros((n, 4))
    K.gaussian_backward(proj.valid, scene.means, view.center, scene.sh, proj.qn, proj.rot, proj.scale,
                        proj.tcam, proj.cov2d, proj.conic, proj.clamped, R_wc,
                        float(view.fx), float(view.fy),
                        g_color, g_mean2d, g_conic, g_mu, g_R, g_s, g_sh, g_q)
    buf = GradientBuffer(means=g_mu, quats=g_q, log_scales=g_s, opacity_logits=g_op,
                         sh=g_sh, semantics=g_sem, grad_factor=g_k)
    if not buf.all_finite():
        for name, arr in buf.items():
            bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
            if bad.any():
                raise FloatingPointError(f"non-finite gradient {name} at primitive {int(np.flatnonzero(bad)[0])}")
    return buf
