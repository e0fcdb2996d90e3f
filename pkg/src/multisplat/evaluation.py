"""Image, geometry and semantic metrics; point-cloud outlier statistics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .config import TrainConfig
from .losses import ssim as _ssim
from .normals import estimate_normals
from .raster import RenderConfig, rasterize
from .scene import Scene, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
MIN_GT_DEPTH = 1e-3
IGNORE_LABEL = 255


def _mask(mask, shape):
    return np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)


def psnr(pred, gt, mask=None) -> float | None:
    """PSNR in dB of images in [0, 1]; ``pred`` is clipped to that range first."""
    pred = np.clip(np.asarray(pred, float), 0.0, 1.0)
    gt = np.asarray(gt, float)
    m = _mask(mask, gt.shape[:2])
    if not m.any():
        return None
    mse = float(np.mean((pred[m] - gt[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(pred, gt) -> float:
    return _ssim(np.clip(np.asarray(pred, float), 0.0, 1.0), np.asarray(gt, float))


def _depth_valid(gt, mask):
    return _mask(mask, gt.shape) & (gt > MIN_GT_DEPTH)


def abs_rel(pred, gt, mask=None) -> float | None:
    m = _depth_valid(gt, mask)
    if not m.any():
        return None
    return float(np.mean(np.abs(pred[m] - gt[m]) / gt[m]))


def rmse(pred, gt, mask=None) -> float | None:
    m = _depth_valid(gt, mask)
    if not m.any():
        return None
    return float(np.sqrt(np.mean((pred[m] - gt[m]) ** 2)))


def cos_simi(pred, gt, mask=None) -> float | None:
    m = _mask(mask, gt.shape[:2])
    if not m.any():
        return None
    return float(np.mean(np.sum(pred[m] * gt[m], axis=-1)))


def miou(pred_labels, gt_labels, num_classes: int, mask=None) -> float | None:
    """Mean IoU over classes present in prediction or ground truth."""
    m = _mask(mask, gt_labels.shape) & (gt_labels != IGNORE_LABEL)
    if not m.any():
        return None
    p = pred_labels[m].astype(np.int64)
    g = gt_labels[m].astype(np.int64)
    conf = np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return float(np.mean(inter[present] / union[present]))


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    abs_rel: float | None = None
    rmse: float | None = None
    cos_simi: float | None = None
    miou: float | None = None
    count: int = 0
    fps: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def render_all(scene: Scene, view, cfg: RenderConfig | None = None, step1=1, step2=4, fuse=0.5,
               mask_threshold=0.5):
    frame, _ = rasterize(scene, view, cfg)
    frame.normals, nstate = estimate_normals(frame.depth, view, step1, step2, fuse, frame.T_final, mask_threshold)
    return frame, nstate


def evaluate_scene(scene: Scene, dataset, split: str = "test", cfg=None, fps_runs: int = 0) -> MetricReport:
    """Metrics averaged over the views of ``split``.

    ``cfg`` is a :class:`TrainConfig` (render and normal settings are taken
    from it); ``fps_runs > 0`` also times the full render.
    """
    cfg = cfg or TrainConfig()
    ids = dataset.split(split)
    if not ids:
        raise ValueError(f"dataset has no {split!r} views")
    rows = []
    for i in ids:
        view, gt = dataset.views[i], dataset.frames[i]
        frame, nstate = render_all(scene, view, cfg.render(), cfg.step1, cfg.step2, cfg.fuse_weight,
                                   cfg.normal_mask_threshold)
        row = {}
        if gt.rgb is not None:
            row["psnr"] = psnr(frame.color, gt.rgb)
            row["ssim"] = ssim(frame.color, gt.rgb)
        if gt.depth is not None:
            row["abs_rel"] = abs_rel(frame.depth, gt.depth)
            row["rmse"] = rmse(frame.depth, gt.depth)
        if gt.normal is not None:
            m = nstate.valid & (np.linalg.norm(gt.normal, axis=-1) > 0.5)
            row["cos_simi"] = cos_simi(frame.normals, gt.normal, m)
        if gt.sem is not None and scene.num_classes:
            row["miou"] = miou(np.argmax(frame.semantics, axis=-1), gt.sem, scene.num_classes)
        rows.append(row)
    keys = ("psnr", "ssim", "abs_rel", "rmse", "cos_simi", "miou")
    report = MetricReport(**{k: _mean(r.get(k) for r in rows) for k in keys}, count=len(scene))
    if fps_runs:
        report.fps = measure_fps(scene, dataset.views[ids[0]], cfg, runs=fps_runs)
    return report


def measure_fps(scene: Scene, view, cfg=None, warmup: int = 10, runs: int = 100) -> float:
    cfg = cfg or TrainConfig()
    rcfg = cfg.render()
    for _ in range(warmup):
        render_all(scene, view, rcfg, cfg.step1, cfg.step2, cfg.fuse_weight)
    t0 = time.perf_counter()
    for _ in range(runs):
        render_all(scene, view, rcfg, cfg.step1, cfg.step2, cfg.fuse_weight)
    return runs / (time.perf_counter() - t0)


# -- point clouds ------------------------------------------------------------

@dataclass
class OutlierReport:
    radio: float
    mean: float
    std: float
    hausdorff: float
    tau: float
    degenerate: bool = False  # all distances equal, so z-scores are undefined

    def as_dict(self) -> dict:
        return asdict(self)


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from each ``src`` point to its nearest ``dst`` point."""
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("point clouds must be non-empty")
    _, idx = cKDTree(dst).query(src)
    # recompute so the value does not depend on the tree's arithmetic
    return np.sqrt(np.sum((src - dst[idx]) ** 2, axis=-1))


def zscore_outliers(pred, gt, tau: float = 0.1) -> OutlierReport:
    d = nearest_distances(pred, gt)
    mu = float(d.mean())
    sd = float(d.std())
    if sd == 0.0:
        log.warning("all nearest-neighbor distances are equal; outlier ratio set to 0")
        radio, degenerate = 0.0, True
    else:
        radio, degenerate = float(np.mean(np.abs(d - mu) / sd > tau)), False
    return OutlierReport(radio, mu, sd, hausdorff(gt, pred), float(tau), degenerate)


def hausdorff(G, P) -> float:
    return float(max(nearest_distances(G, P).max(), nearest_distances(P, G).max()))


def sample_scene_points(scene: Scene, n: int, region=None, seed: int = 0) -> np.ndarray:
    """Draw ``n`` points uniformly inside 1-sigma ellipsoids.

    Gaussians are picked with probability proportional to opacity; samples
    outside the axis-aligned ``region = (lo, hi)`` are dropped.
    """
    rng = np.random.default_rng(seed)
    if len(scene) == 0 or n <= 0:
        return np.zeros((0, 3))
    w = sigmoid(scene.opacity_logits)
    pick = rng.choice(len(scene), size=n, p=w / w.sum())
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    q = scene.quats / np.linalg.norm(scene.quats, axis=1, keepdims=True)
    R = np.stack([quat_to_rotmat(qi) for qi in q])
    local = u * np.exp(scene.log_scales[pick])
    pts = scene.means[pick] + np.einsum("nij,nj->ni", R[pick], local)
    if region is not None:
        lo, hi = (np.asarray(b, float) for b in region)
        pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    return pts
