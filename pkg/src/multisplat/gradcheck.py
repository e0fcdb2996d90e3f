"""Finite-difference suites for every hand-written backward pass.

Each suite compares an analytic gradient against central differences on
seeded random cases and reports the worst relative error. Backward functions
are looked up through their modules at call time, so a patched (or broken)
implementation is what gets checked.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import camera as cam
from . import losses as L
from . import normals as nrm
from . import raster
from .oracle import brute_force_render, rel_error
from .scene import ActivatedGaussian, Scene, chain_activations

THRESHOLDS = {"intersection": 1e-4, "depth_chain": 1e-3, "normals": 1e-3, "losses": 1e-4}
MIN_DISCRIMINANT = 1e-6


@dataclass
class SuiteResult:
    name: str
    max_rel: float
    threshold: float
    checked: int
    excluded: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel < self.threshold

    def as_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def random_unit_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


# -- ray-ellipsoid intersection ----------------------------------------------

def random_hit_case(rng):
    """A Gaussian, a camera outside it and a ray through its interior."""
    target = np.array([0.0, 0.0, 4.0])
    while True:
        g = ActivatedGaussian(mu=target + 0.5 * rng.normal(size=3), q=random_unit_quat(rng),
                              s=rng.uniform(0.1, 1.0, 3), alpha=0.5, sh=np.zeros((1, 3)),
                              o=np.zeros(0), k=0.9)
        origin = 0.5 * rng.normal(size=3)
        u = rng.normal(size=3)
        u *= rng.uniform(0.0, 0.9) / np.linalg.norm(u)
        inside = g.mu + g.R @ (g.s * u)
        d = inside - origin
        d /= np.linalg.norm(d)
        hit = cam.intersect(g, origin, d)
        if hit is not None and hit.c > 0:  # origin outside the ellipsoid
            view = cam.CameraView.look_at(origin, target, [0, -1, 0], 16, 16)
            return g, view, origin, d, hit


def _depth_of(theta, g, view, origin, d):
    g2 = ActivatedGaussian(theta[:3], theta[3:7] / np.linalg.norm(theta[3:7]), theta[7:10],
                           g.alpha, g.sh, g.o, g.k)
    hit = cam.intersect(g2, origin, d)
    return np.nan if hit is None else cam.midpoint_depth(view, origin, d, hit.t_mid)


def check_intersection(seed: int = 0, cases: int = 100, eps: float = 1e-5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checked, excluded = 0.0, 0, 0
    for _ in range(cases):
        g, view, origin, d, hit = random_hit_case(rng)
        if abs(hit.discriminant) < MIN_DISCRIMINANT:
            excluded += 1
            continue
        grad = cam.intersection_backward(hit, 1.0, view, origin, d, g)
        theta = np.concatenate([g.mu, g.q, g.s])
        num = _fd(lambda t: _depth_of(t, g, view, origin, d), theta, eps)
        # raw-quaternion FD equals the unit-quaternion gradient projected on the tangent plane
        dq = grad.dq - (grad.dq @ g.q) * g.q
        ana = np.concatenate([grad.dmu, dq, grad.ds])
        worst = max(worst, float(rel_error(ana, num, 1e-6).max()))
        checked += 1
    return SuiteResult("intersection", worst, THRESHOLDS["intersection"], checked, excluded)


def _fd(f, theta, eps):
    theta = np.array(theta, float)
    out = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        out[i] = (f(tp) - f(tm)) / (2 * eps)
    return out


# -- depth loss through the rasterizer ----------------------------------------

def random_depth_scene(rng, size: int = 16, max_gaussians: int = 10):
    """Small overlapping scene in front of a look-at camera, plus a target depth map."""
    n = int(rng.integers(3, max_gaussians + 1))
    s = Scene.zeros(n, num_classes=2)
    s.means[:] = rng.uniform(-0.8, 0.8, (n, 3))
    s.means[:, 2] += 3.5
    s.quats[:] = np.stack([random_unit_quat(rng) for _ in range(n)])
    s.log_scales[:] = np.log(rng.uniform(0.2, 0.7, (n, 3)))
    s.opacity_logits[:] = rng.uniform(-1, 2, n)
    s.sh[:] = rng.normal(scale=0.3, size=s.sh.shape)
    view = cam.CameraView.look_at([0, 0, 0], [0, 0, 3.5], [0, -1, 0], size, size)
    return s, view, rng.uniform(2, 5, (size, size))


def check_depth_chain(seed: int = 0, cases: int = 20, eps: float = 1e-5) -> SuiteResult:
    """dL/d{means, quats, log_scales} of the masked depth L1 loss.

    A coordinate is skipped when the perturbation changes any discrete
    decision of the oracle renderer or the sign of a depth residual.
    """
    rng = np.random.default_rng(seed)
    cfg = raster.RenderConfig()
    worst, checked, excluded = 0.0, 0, 0
    for _ in range(cases):
        s, view, target = random_depth_scene(rng)
        frame, replay = raster.rasterize(s, view, cfg)
        _, seed_grad = L.depth_l1(frame.depth, target)
        pix = raster.PixelGradients.zeros(frame)
        pix.depth[:] = seed_grad
        g = chain_activations(raster.rasterize_backward(s, view, frame, replay, pix), s)
        ref, sig0 = brute_force_render(s, view, cfg, trace=True)
        sign0 = np.sign(ref.depth - target)
        for name in ("means", "quats", "log_scales"):
            arr = getattr(s, name)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                vals, stable = [], True
                for e in (eps, -eps):
                    arr[idx] = old + e
                    fr, sig = brute_force_render(s, view, cfg, trace=True)
                    stable &= sig == sig0 and bool(np.all(np.sign(fr.depth - target) == sign0))
                    vals.append(L.depth_l1(fr.depth, target)[0])
                arr[idx] = old
                if not stable:
                    excluded += 1
                    continue
                num = (vals[0] - vals[1]) / (2 * eps)
                worst = max(worst, float(rel_error(getattr(g, name)[idx], num, 1e-6)))
                checked += 1
    return SuiteResult("depth_chain", worst, THRESHOLDS["depth_chain"], checked, excluded)


# -- depth-to-normal estimation ----------------------------------------------

def smooth_depth_case(rng, size: int = 16):
    view = cam.CameraView.look_at(0.3 * rng.normal(size=3), [0, 0, 3], [0, -1, 0], size, size)
    uu, vv = np.meshgrid(np.arange(size) / size, np.arange(size) / size)
    c = rng.normal(size=5)
    D = (3 + 0.3 * c[0] * uu + 0.3 * c[1] * vv + 0.2 * np.sin(3 * uu + c[2]) * np.cos(2 * vv + c[3])
         + 0.1 * c[4] * uu * vv)
    target = rng.normal(size=(size, size, 3))
    target /= np.linalg.norm(target, axis=-1, keepdims=True)
    return view, D, target


def check_normals(seed: int = 0, cases: int = 20, eps: float = 1e-4) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checked, excluded = 0.0, 0, 0
    for _ in range(cases):
        view, D, target = smooth_depth_case(rng)
        N, state = nrm.estimate_normals(D, view)
        mask = state.valid
        _, dN = L.normal_cosine(N, target, mask)
        ana = nrm.normals_backward(dN, state, view)

        def loss(depth):
            return L.normal_cosine(nrm.estimate_normals(depth, view)[0], target, mask)[0]

        num = np.zeros_like(D)
        for idx in np.ndindex(D.shape):
            Dp, Dm = D.copy(), D.copy()
            Dp[idx] += eps
            Dm[idx] -= eps
            if not (np.array_equal(nrm.estimate_normals(Dp, view)[1].flip, state.flip)
                    and np.array_equal(nrm.estimate_normals(Dm, view)[1].flip, state.flip)):
                excluded += 1
                continue
            num[idx] = (loss(Dp) - loss(Dm)) / (2 * eps)
            checked += 1
        floor = 1e-3 * max(np.abs(num).max(), 1e-12)
        worst = max(worst, float(rel_error(ana, num, floor).max()))
    return SuiteResult("normals", worst, THRESHOLDS["normals"], checked, excluded)


# -- image losses -------------------------------------------------------------

def check_losses(seed: int = 0, cases: int = 3, eps: float = 1e-6, size: int = 12) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for _ in range(cases):
        pred = rng.uniform(0.1, 0.9, (size, size, 3))
        gt = rng.uniform(0.1, 0.9, (size, size, 3))
        dpred = rng.uniform(1, 4, (size, size))
        dgt = rng.uniform(1, 4, (size, size))
        mask = rng.uniform(size=(size, size)) > 0.3
        npred = rng.normal(size=(size, size, 3))
        ngt = rng.normal(size=(size, size, 3))
        ngt /= np.linalg.norm(ngt, axis=-1, keepdims=True)
        logits = rng.normal(size=(size, size, 4))
        labels = rng.integers(0, 4, (size, size)).astype(np.uint8)
        labels[rng.uniform(size=(size, size)) < 0.1] = L.IGNORE_LABEL
        kmap = rng.uniform(0.5, 1.5, (size, size))
        cases_ = [
            (lambda x: L.ssim_loss(x, gt), pred),
            (lambda x: L.l1_rgb(x, gt), pred),
            (lambda x: L.depth_l1(x, dgt, mask), dpred),
            (lambda x: L.normal_cosine(x, ngt, mask), npred),
            (lambda x: L.cross_entropy_seg(x, labels), logits),
            (lambda x: L.gradient_factor_loss(x), kmap),
        ]
        for fn, x in cases_:
            _, ana = fn(x)
            num = _fd(lambda t: fn(t.reshape(x.shape))[0], x.ravel(), eps).reshape(x.shape)
            worst = max(worst, float(rel_error(ana, num, 1e-6).max()))
            checked += x.size
    return SuiteResult("losses", worst, THRESHOLDS["losses"], checked)


SUITES = {
    "intersection": check_intersection,
    "depth_chain": check_depth_chain,
    "normals": check_normals,
    "losses": check_losses,
}


def run_all(seed: int = 0, cases: int | None = None, suites=None) -> list[SuiteResult]:
    out = []
    for name in suites or SUITES:
        fn = SUITES[name]
        out.append(fn(seed) if cases is None else fn(seed, cases))
    return out
