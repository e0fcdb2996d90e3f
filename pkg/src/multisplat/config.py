"""Training configuration with defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .losses import DEFAULT_WEIGHTS, TERMS
from .raster import RenderConfig

LR_GROUPS = ("position", "rotation", "scale", "opacity", "sh", "semantics", "k")


def default_lrs() -> dict[str, float]:
    return {"position": 1.6e-4, "rotation": 1e-3, "scale": 5e-3, "opacity": 5e-2,
            "sh": 2.5e-3, "semantics": 2.5e-2, "k": 5e-2}


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: dict = field(default_factory=default_lrs)
    loss_weights: tuple = DEFAULT_WEIGHTS
    prune_interval: int = 3000
    prune_threshold: float = 0.5
    # prune |k - 1| < T instead of > T (the other reading of the rule)
    prune_inverted: bool = False
    # also prune Gaussians that received no blending weight since the last reset
    prune_unseen: bool = True
    prune: bool = True
    k_reset: float = 0.9
    step1: int = 1
    step2: int = 4
    fuse_weight: float = 0.5
    normal_mask_threshold: float = 0.5
    sigma_scale: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    depth_grad_to_alpha: bool = True
    min_transmittance: float = 1e-4
    sh_degree: int = 2
    init_opacity: float = 0.1
    init_neighbors: int = 3
    seed: int = 0

    def __post_init__(self):
        lr = default_lrs()
        unknown = set(self.lr) - set(LR_GROUPS)
        if unknown:
            raise ValueError(f"unknown learning-rate group(s): {sorted(unknown)}")
        lr.update(self.lr)
        self.lr = lr
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.background = tuple(float(b) for b in self.background)
        if len(self.loss_weights) != len(TERMS):
            raise ValueError(f"loss_weights needs {len(TERMS)} entries ({', '.join(TERMS)}), "
                             f"got {len(self.loss_weights)}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.prune_interval < 1:
            raise ValueError("prune_interval must be >= 1")
        if not self.prune_threshold > 0:
            raise ValueError("prune_threshold must be > 0")
        if any(not v > 0 for v in self.lr.values()):
            raise ValueError("learning rates must be > 0")
        if not 0 < self.step1 < self.step2:
            raise ValueError("need 0 < step1 < step2")
        if not 0 <= self.fuse_weight <= 1:
            raise ValueError("fuse_weight must be in [0, 1]")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")
        if not 0 < self.init_opacity < 1:
            raise ValueError("init_opacity must be in (0, 1)")

    def render(self) -> RenderConfig:
        return RenderConfig(sigma_scale=self.sigma_scale, background=self.background,
                            depth_grad_to_alpha=self.depth_grad_to_alpha,
                            min_transmittance=self.min_transmittance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**d)
