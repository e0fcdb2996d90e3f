"""Per-modality losses with analytic gradients, and the magnitude-balanced sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
IGNORE_LABEL = 255
TERMS = ("l1", "ssim", "normal", "depth", "seg", "k")
DEFAULT_WEIGHTS = (1.0, 0.1, 0.1, 0.1, 0.1, 0.1)
ZERO_LOSS = 1e-12


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _mask_count(mask, shape) -> tuple[np.ndarray, int]:
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    _check_shapes(mask, np.empty(shape))
    return mask, int(mask.sum())


def l1_rgb(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    _check_shapes(pred, gt)
    diff = pred - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


def _blur(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'same' filtering with zero padding over the two image axes."""
    out = correlate1d(img, w, axis=0, mode="constant")
    return correlate1d(out, w, axis=1, mode="constant")


def ssim_map(x: np.ndarray, y: np.ndarray):
    """Per-pixel SSIM and the intermediates needed for its gradient."""
    _check_shapes(x, y)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mx = _blur(x, w)
    my = _blur(y, w)
    sxx = _blur(x * x, w) - mx * mx
    syy = _blur(y * y, w) - my * my
    sxy = _blur(x * y, w) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    s = a1 * a2 / (b1 * b2)
    return s, (w, mx, my, a1, a2, b1, b2)


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    return float(ssim_map(x, y)[0].mean())


def ssim_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """1 − mean SSIM and its gradient w.r.t. ``pred``."""
    s, (w, mx, my, a1, a2, b1, b2) = ssim_map(pred, gt)
    n = s.size
    # S depends on pred through mx, E[x^2] and E[xy]
    ds_dmx = 2 * my * a2 / (b1 * b2) - 2 * my * a1 / (b1 * b2) - s * (2 * mx / b1 - 2 * mx / b2)
    ds_dexx = -s / b2
    ds_dexy = 2 * a1 / (b1 * b2)
    g = -1.0 / n
    grad = (_blur(g * ds_dmx, w) + 2 * pred * _blur(g * ds_dexx, w) + gt * _blur(g * ds_dexy, w))
    return float(1.0 - s.mean()), grad


def depth_l1(pred: np.ndarray, gt: np.ndarray, mask=None) -> tuple[float, np.ndarray]:
    _check_shapes(pred, gt)
    mask, n = _mask_count(mask, pred.shape)
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = np.where(mask, pred - gt, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def normal_cosine(pred: np.ndarray, gt: np.ndarray, mask=None) -> tuple[float, np.ndarray]:
    _check_shapes(pred, gt)
    mask, n = _mask_count(mask, pred.shape[:2])
    if n == 0:
        return 0.0, np.zeros_like(pred)
    dots = np.einsum("hwc,hwc->hw", pred, gt)
    return float(1.0 - dots[mask].sum() / n), np.where(mask[..., None], -gt / n, 0.0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_seg(logits: np.ndarray, labels: np.ndarray, mask=None) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy; label 255 means unlabeled."""
    if logits.shape[:2] != labels.shape:
        raise ValueError(f"shape mismatch: {logits.shape[:2]} vs {labels.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels != IGNORE_LABEL
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    C = logits.shape[-1]
    if np.any(labels[keep] >= C) or np.any(labels[keep] < 0):
        raise ValueError(f"label outside [0, {C})")
    n = int(keep.sum())
    if n == 0 or C == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    idx = np.where(keep, labels, 0)
    picked = np.take_along_axis(log_p, idx[..., None], axis=-1)[..., 0]
    grad = np.exp(log_p)
    np.put_along_axis(grad, idx[..., None], np.take_along_axis(grad, idx[..., None], axis=-1) - 1.0, axis=-1)
    grad = np.where(keep[..., None], grad / n, 0.0)
    return float(-picked[keep].sum() / n), grad


def gradient_factor_loss(k_map: np.ndarray, mask=None) -> tuple[float, np.ndarray]:
    mask, n = _mask_count(mask, k_map.shape)
    if n == 0:
        return 0.0, np.zeros_like(k_map)
    diff = np.where(mask, k_map - 1.0, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


@dataclass
class LossReport:
    l1: float = 0.0
    ssim: float = 0.0
    normal: float = 0.0
    depth: float = 0.0
    seg: float = 0.0
    k: float = 0.0
    combined: float = 0.0
    scales: dict = field(default_factory=dict)

    def terms(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TERMS}

    def as_dict(self) -> dict:
        out = self.terms()
        out["combined"] = self.combined
        return out


def combine(report: LossReport, weights=DEFAULT_WEIGHTS) -> tuple[float, dict[str, float]]:
    """Balanced total and the constant factor each term's gradient seed gets.

    Every term other than L1 is rescaled to the L1 magnitude before weighting;
    the rescaling ratio is treated as a constant.
    """
    if len(weights) != len(TERMS):
        raise ValueError(f"expected {len(TERMS)} loss weights, got {len(weights)}")
    parts = report.terms()
    l1 = abs(parts["l1"])
    scales = {"l1": float(weights[0])}
    total = weights[0] * parts["l1"]
    for name, lam in zip(TERMS[1:], weights[1:]):
        lx = parts[name]
        if abs(lx) < ZERO_LOSS or lam == 0.0:
            scales[name] = 0.0
            continue
        scales[name] = lam * l1 / abs(lx)
        total += scales[name] * lx
    report.combined = float(total)
    report.scales = scales
    return float(total), scales
