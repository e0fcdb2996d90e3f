"""Gaussian map representation, activations and gradient buffers.

A scene is stored as a struct of arrays. Raw (optimizer-facing) parameters
use the usual splatting parameterization: log scale, opacity logit and an
unnormalized quaternion in (w, x, y, z) order.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

SH_C0 = 0.28209479177387814

# order matters: it is the layout used by the optimizer and the PLY writer
PARAM_NAMES = (
    "means",
    "quats",
    "log_scales",
    "opacity_logits",
    "sh",
    "semantics",
    "grad_factor",
)

K_RESET = 0.9


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_grad_to_quat(q, dR) -> np.ndarray:
    """Pull a gradient w.r.t. R(q) back to the (unit) quaternion components."""
    w, x, y, z = q
    g = dR
    gw = 2 * (-z * g[0, 1] + y * g[0, 2] + z * g[1, 0] - x * g[1, 2] - y * g[2, 0] + x * g[2, 1])
    gx = 2 * (y * g[0, 1] + z * g[0, 2] + y * g[1, 0] - 2 * x * g[1, 1] - w * g[1, 2]
              + z * g[2, 0] + w * g[2, 1] - 2 * x * g[2, 2])
    gy = 2 * (-2 * y * g[0, 0] + x * g[0, 1] + w * g[0, 2] + x * g[1, 0] + z * g[1, 2]
              - w * g[2, 0] + z * g[2, 1] - 2 * y * g[2, 2])
    gz = 2 * (-2 * z * g[0, 0] - w * g[0, 1] + x * g[0, 2] + w * g[1, 0] - 2 * z * g[1, 1]
              + y * g[1, 2] + x * g[2, 0] + y * g[2, 1])
    return np.array([gw, gx, gy, gz])


@dataclass
class GaussianPrimitive:
    """One splat with raw parameters."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # (C_h, 3)
    semantic_logits: np.ndarray  # (C_o,)
    gradient_factor: float = K_RESET


@dataclass
class ActivatedGaussian:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    alpha: float
    sh: np.ndarray
    o: np.ndarray
    k: float

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)


def activate(g: GaussianPrimitive, index: int | None = None) -> ActivatedGaussian:
    values = [g.position, g.rotation, g.log_scale, g.opacity_logit, g.sh_coeffs,
              g.semantic_logits, g.gradient_factor]
    if not all(np.all(np.isfinite(v)) for v in values):
        where = f" at primitive {index}" if index is not None else ""
        raise ValueError(f"non-finite Gaussian parameter{where}")
    q = np.asarray(g.rotation, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        where = f" at primitive {index}" if index is not None else ""
        raise ValueError(f"zero quaternion{where}")
    return ActivatedGaussian(
        mu=np.asarray(g.position, dtype=np.float64),
        q=q / qn,
        s=np.exp(np.asarray(g.log_scale, dtype=np.float64)),
        alpha=float(sigmoid(g.opacity_logit)),
        sh=np.asarray(g.sh_coeffs, dtype=np.float64),
        o=np.asarray(g.semantic_logits, dtype=np.float64),
        k=float(g.gradient_factor),
    )


@dataclass
class Scene:
    """Ordered collection of Gaussians as parallel arrays.

    Shapes: means (N,3), quats (N,4), log_scales (N,3), opacity_logits (N,),
    sh (N, C_h, 3), semantics (N, C_o), grad_factor (N,).
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    semantics: np.ndarray
    grad_factor: np.ndarray
    num_classes: int = 0
    sh_degree: int = 2

    def __post_init__(self):
        n = self.means.shape[0]
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
            setattr(self, name, arr)
        if not 0 <= self.sh_degree <= 3:
            raise ValueError(f"sh_degree must be in [0, 3], got {self.sh_degree}")
        if self.sh.shape[1:] != (num_sh_coeffs(self.sh_degree), 3):
            raise ValueError(f"sh has shape {self.sh.shape}, expected (N, {num_sh_coeffs(self.sh_degree)}, 3)")
        if self.semantics.shape[1:] != (self.num_classes,):
            raise ValueError(f"semantics has shape {self.semantics.shape}, expected (N, {self.num_classes})")

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls, num_classes: int = 0, sh_degree: int = 2) -> "Scene":
        return cls.zeros(0, num_classes, sh_degree)

    @classmethod
    def zeros(cls, n: int, num_classes: int = 0, sh_degree: int = 2) -> "Scene":
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        return cls(
            means=np.zeros((n, 3)),
            quats=quats,
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            sh=np.zeros((n, num_sh_coeffs(sh_degree), 3)),
            semantics=np.zeros((n, num_classes)),
            grad_factor=np.full(n, K_RESET),
            num_classes=num_classes,
            sh_degree=sh_degree,
        )

    @classmethod
    def from_primitives(cls, prims, num_classes: int, sh_degree: int = 2) -> "Scene":
        prims = list(prims)
        scene = cls.zeros(len(prims), num_classes, sh_degree)
        for i, p in enumerate(prims):
            scene.means[i] = p.position
            scene.quats[i] = p.rotation
            scene.log_scales[i] = p.log_scale
            scene.opacity_logits[i] = p.opacity_logit
            scene.sh[i] = p.sh_coeffs
            scene.semantics[i] = p.semantic_logits
            scene.grad_factor[i] = p.gradient_factor
        return scene

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.means[i].copy(),
            rotation=self.quats[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh[i].copy(),
            semantic_logits=self.semantics[i].copy(),
            gradient_factor=float(self.grad_factor[i]),
        )

    def activated(self, i: int) -> ActivatedGaussian:
        return activate(self.primitive(i), index=i)

    def copy(self) -> "Scene":
        return replace(self, **{name: getattr(self, name).copy() for name in PARAM_NAMES})

    def subset(self, keep) -> "Scene":
        return replace(self, **{name: getattr(self, name)[keep].copy() for name in PARAM_NAMES})

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def check_finite(self) -> None:
        if len(self) == 0:
            return
        for name in PARAM_NAMES:
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(len(self), -1)).all(axis=1)
            if bad.any():
                raise ValueError(f"non-finite {name} at primitive {int(np.flatnonzero(bad)[0])}")
        norms = np.linalg.norm(self.quats, axis=1)
        if (norms == 0).any():
            raise ValueError(f"zero quaternion at primitive {int(np.flatnonzero(norms == 0)[0])}")


@dataclass
class GradientBuffer:
    """Per-primitive gradient accumulators, laid out like :class:`Scene`.

    Whether the entries are w.r.t. activated or raw values depends on where the
    buffer is in the pipeline; see :func:`chain_activations`.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    semantics: np.ndarray
    grad_factor: np.ndarray

    @classmethod
    def zeros_like(cls, scene: Scene) -> "GradientBuffer":
        return cls(**{name: np.zeros_like(getattr(scene, name)) for name in PARAM_NAMES})

    def __len__(self) -> int:
        return self.means.shape[0]

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.items()])

    def __add__(self, other: "GradientBuffer") -> "GradientBuffer":
        return GradientBuffer(**{n: v + getattr(other, n) for n, v in self.items()})


def chain_activations(buf: GradientBuffer, scene: Scene) -> GradientBuffer:
    """Map gradients w.r.t. activated values onto raw stored parameters.

    The activated-space buffer stores dL/ds in ``log_scales``, dL/dalpha in
    ``opacity_logits`` and dL/dq_unit in ``quats``.
    """
    s = np.exp(scene.log_scales)
    alpha = sigmoid(scene.opacity_logits)
    norms = np.linalg.norm(scene.quats, axis=1, keepdims=True)
    qhat = scene.quats / norms
    dq = buf.quats
    radial = np.sum(dq * qhat, axis=1, keepdims=True)
    dq_raw = (dq - radial * qhat) / norms
    return GradientBuffer(
        means=buf.means.copy(),
        quats=dq_raw,
        log_scales=buf.log_scales * s,
        opacity_logits=buf.opacity_logits * alpha * (1.0 - alpha),
        sh=buf.sh.copy(),
        semantics=buf.semantics.copy(),
        grad_factor=buf.grad_factor.copy(),
    )
