"""Optimization loop: Adam, gradient-factor pruning with reset, run log."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import losses as L
from .config import TrainConfig
from .io import SceneDataset, save_scene_ply
from .normals import estimate_normals, normals_backward
from .raster import PixelGradients, rasterize, rasterize_backward
from .scene import PARAM_NAMES, GradientBuffer, Scene, chain_activations, logit, rgb_to_sh_dc

log = logging.getLogger(__name__)

PARAM_GROUP = {
    "means": "position",
    "quats": "rotation",
    "log_scales": "scale",
    "opacity_logits": "opacity",
    "sh": "sh",
    "semantics": "semantics",
    "grad_factor": "k",
}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
SINGLE_POINT_SCALE = 0.01


class TrainingHalted(RuntimeError):
    def __init__(self, msg: str, scene: Scene, iteration: int):
        super().__init__(msg)
        self.scene = scene
        self.iteration = iteration


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, scene: Scene) -> "AdamState":
        return cls({n: np.zeros_like(getattr(scene, n)) for n in PARAM_NAMES},
                   {n: np.zeros_like(getattr(scene, n)) for n in PARAM_NAMES})

    def subset(self, keep) -> "AdamState":
        return AdamState({n: a[keep].copy() for n, a in self.m.items()},
                         {n: a[keep].copy() for n, a in self.v.items()}, self.step)


def adam_step(scene: Scene, grads: GradientBuffer, state: AdamState, lrs: dict[str, float],
              betas=ADAM_BETAS, eps=ADAM_EPS) -> None:
    """In-place Adam update of every parameter group."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = getattr(scene, name)
        p -= lrs[PARAM_GROUP[name]] * (m / c1) / (np.sqrt(v / c2) + eps)


def init_scene(points, colors, num_classes: int, cfg: TrainConfig | None = None) -> Scene:
    """One Gaussian per point, isotropic scale = mean distance to the nearest neighbors."""
    cfg = cfg or TrainConfig()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise ValueError("cannot initialize a scene from an empty point list")
    colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(n, 3)
    if n == 1:
        dist = np.array([SINGLE_POINT_SCALE])
    else:
        k = min(cfg.init_neighbors, n - 1)
        d, _ = cKDTree(points).query(points, k=k + 1)
        dist = d[:, 1:].mean(axis=1)
        dist = np.where(dist > 0, dist, SINGLE_POINT_SCALE)
    scene = Scene.zeros(n, num_classes, cfg.sh_degree)
    scene.means[:] = points
    scene.log_scales[:] = np.log(dist)[:, None]
    scene.opacity_logits[:] = logit(cfg.init_opacity)
    scene.sh[:, 0, :] = rgb_to_sh_dc(colors)
    scene.grad_factor[:] = cfg.k_reset
    return scene


def prune_mask(scene: Scene, threshold: float, inverted: bool = False, unseen=None) -> np.ndarray:
    dev = np.abs(scene.grad_factor - 1.0)
    remove = dev < threshold if inverted else dev > threshold
    if unseen is not None:
        remove |= unseen
    return remove


def prune(scene: Scene, state: AdamState | None, threshold: float, k_reset: float = 0.9,
          inverted: bool = False, unseen=None) -> tuple[Scene, AdamState | None, int]:
    """Remove anomalous Gaussians and reset the survivors' k.

    ``unseen`` optionally marks Gaussians that received no blending weight
    since the previous reset; they are removed too.
    """
    remove = prune_mask(scene, threshold, inverted, unseen)
    if remove.all():
        raise ValueError(f"pruning would remove all {len(scene)} Gaussians (threshold {threshold})")
    keep = ~remove
    scene = scene.subset(keep)
    scene.grad_factor[:] = k_reset
    if state is not None:
        state = state.subset(keep)
    return scene, state, int(remove.sum())


@dataclass
class StepResult:
    report: L.LossReport
    grads: GradientBuffer
    weight_sum: np.ndarray


def compute_step(scene: Scene, dataset: SceneDataset, idx: int, cfg: TrainConfig) -> StepResult:
    """Forward, losses and backward for one training view (raw-parameter gradients)."""
    view = dataset.views[idx]
    gt = dataset.frames[idx]
    rcfg = cfg.render()
    frame, replay = rasterize(scene, view, rcfg)
    w = dict(zip(L.TERMS, cfg.loss_weights))
    report = L.LossReport()
    seeds = {}
    if gt.rgb is not None:
        report.l1, seeds["l1"] = L.l1_rgb(frame.color, gt.rgb)
        if w["ssim"]:
            report.ssim, seeds["ssim"] = L.ssim_loss(frame.color, gt.rgb)
    if w["depth"] and gt.depth is not None:
        report.depth, seeds["depth"] = L.depth_l1(frame.depth, gt.depth, gt.depth > 0)
    nstate = None
    if w["normal"] and gt.normal is not None:
        N, nstate = estimate_normals(frame.depth, view, cfg.step1, cfg.step2, cfg.fuse_weight,
                                     frame.T_final, cfg.normal_mask_threshold)
        frame.normals = N
        mask = nstate.valid & (np.linalg.norm(gt.normal, axis=-1) > 0.5)
        report.normal, seeds["normal"] = L.normal_cosine(N, gt.normal, mask)
    if w["seg"] and gt.sem is not None and scene.num_classes:
        report.seg, seeds["seg"] = L.cross_entropy_seg(frame.semantics, gt.sem)
    if w["k"]:
        report.k, seeds["k"] = L.gradient_factor_loss(frame.k_map)
    _, scales = L.combine(report, cfg.loss_weights)

    pix = PixelGradients.zeros(frame)
    if "l1" in seeds:
        pix.color += scales["l1"] * seeds["l1"]
    if "ssim" in seeds:
        pix.color += scales["ssim"] * seeds["ssim"]
    if "depth" in seeds:
        pix.depth += scales["depth"] * seeds["depth"]
    if "normal" in seeds and scales["normal"]:
        pix.depth += normals_backward(scales["normal"] * seeds["normal"], nstate, view)
    if "seg" in seeds:
        pix.semantics += scales["seg"] * seeds["seg"]
    if "k" in seeds:
        pix.k_map += scales["k"] * seeds["k"]
    grads = chain_activations(rasterize_backward(scene, view, frame, replay, pix), scene)
    return StepResult(report, grads, frame.weight_sum)


@dataclass
class TrainResult:
    scene: Scene
    log: list[dict] = field(default_factory=list)
    pruned: list[tuple[int, int]] = field(default_factory=list)  # (iteration, removed)


def view_schedule(n_views: int, iterations: int, seed: int) -> list[int]:
    """Round-robin over the training views, reshuffled every pass."""
    rng = np.random.default_rng(seed)
    order = []
    while len(order) < iterations:
        order.extend(rng.permutation(n_views).tolist())
    return order[:iterations]


def train(dataset: SceneDataset, cfg: TrainConfig, scene: Scene | None = None,
          out_dir=None, timing: bool = True, progress=None) -> TrainResult:
    train_ids = dataset.train
    if len(train_ids) < 1:
        raise ValueError("dataset has no training views")
    if scene is None:
        scene = init_scene(dataset.points, dataset.colors, dataset.num_classes, cfg)
    scene = scene.copy()
    state = AdamState.zeros(scene)
    schedule = view_schedule(len(train_ids), cfg.iterations, cfg.seed)
    result = TrainResult(scene)
    seen = np.zeros(len(scene), dtype=bool)
    steps_since_reset = 0
    out_dir = Path(out_dir) if out_dir is not None else None

    for it, pick in enumerate(schedule, start=1):
        idx = train_ids[pick]
        t0 = time.perf_counter()
        try:
            step = compute_step(scene, dataset, idx, cfg)
            problem = None
            if not (np.isfinite(step.report.combined) and step.grads.all_finite()):
                problem = "non-finite loss or gradient"
        except FloatingPointError as e:
            problem = str(e)
        if problem is None:
            before = scene.copy()
            adam_step(scene, step.grads, state, cfg.lr)
            if not all(np.all(np.isfinite(p)) for p in scene.params().values()):
                problem, scene = "parameter update overflowed", before
        if problem is not None:
            if out_dir is not None:
                save_scene_ply(scene, out_dir / "last_good.ply")
            raise TrainingHalted(f"iteration {it} (view {idx}): {problem}", scene, it)
        seen |= step.weight_sum > 0
        steps_since_reset += 1

        removed = 0
        if cfg.prune and it % cfg.prune_interval == 0:
            unseen = ~seen if cfg.prune_unseen and steps_since_reset > 0 else None
            scene, state, removed = prune(scene, state, cfg.prune_threshold, cfg.k_reset,
                                          cfg.prune_inverted, unseen)
            seen = np.zeros(len(scene), dtype=bool)
            steps_since_reset = 0
            result.pruned.append((it, removed))
            log.info("iteration %d: pruned %d Gaussians, %d left", it, removed, len(scene))

        rec = {"iter": it, "view": int(idx), **step.report.as_dict(), "count": len(scene), "pruned": removed}
        if timing:
            rec["seconds"] = time.perf_counter() - t0
        result.log.append(rec)
        if progress is not None:
            progress(rec)
    result.scene = scene
    return result
