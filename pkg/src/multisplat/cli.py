"""Command-line entry points: train, render, evaluate, gradcheck, prune-report.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import TrainConfig
from .evaluation import evaluate_scene, render_all, sample_scene_points, zscore_outliers
from .io import (load_cameras, load_config, load_dataset, load_scene_ply, save_config,
                 save_scene_ply, write_pfm, write_png, write_records)
from .losses import TERMS
from .trainer import TrainingHalted, train

log = logging.getLogger("multisplat")

MODALITIES = ("rgb", "depth", "normal", "sem", "k")
# fixed label colors; classes beyond the table wrap around
PALETTE = np.array([
    [128, 128, 128], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
], dtype=np.uint8)
HIST_BINS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, np.inf)


class UsageError(Exception):
    pass


def _required_modalities(cfg: TrainConfig) -> tuple[str, ...]:
    w = dict(zip(TERMS, cfg.loss_weights))
    need = ["rgb"]
    if w["depth"]:
        need.append("depth")
    if w["normal"]:
        need.append("normal")
    if w["seg"]:
        need.append("sem")
    return tuple(need)


def _dump(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    print(text)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    ds = load_dataset(args.data, require=_required_modalities(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    def progress(rec):
        if rec["iter"] % max(1, cfg.iterations // 20) == 0:
            log.info("iter %d  loss %.5f  count %d", rec["iter"], rec["combined"], rec["count"])

    try:
        result = train(ds, cfg, out_dir=out, timing=not args.deterministic, progress=progress)
    except TrainingHalted as e:
        print(f"error: training halted at {e}; last good scene saved to {out / 'last_good.ply'}",
              file=sys.stderr)
        return 1
    save_scene_ply(result.scene, out / "scene.ply")
    write_records(out / "log.jsonl", result.log)
    if ds.test:
        report = evaluate_scene(result.scene, ds, "test", cfg).as_dict()
        _dump(report, out / "metrics.json")
    return 0


def _frame_names(meta: dict) -> list[str]:
    return [fr.get("name", f"{i:04d}") for i, fr in enumerate(meta["frames"])]


def cmd_render(args) -> int:
    mods = [m.strip() for m in args.modalities.split(",") if m.strip()]
    unknown = set(mods) - set(MODALITIES)
    if unknown:
        raise UsageError(f"unknown modalities {sorted(unknown)}; choose from {', '.join(MODALITIES)}")
    cfg = load_config(args.config) if args.config else TrainConfig()
    scene = load_scene_ply(args.scene)
    meta, views = load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, view in zip(_frame_names(meta), views):
        frame, _ = render_all(scene, view, cfg.render(), cfg.step1, cfg.step2, cfg.fuse_weight,
                              cfg.normal_mask_threshold)
        if "rgb" in mods:
            write_png(out / f"{name}_rgb.png", np.clip(frame.color, 0.0, 1.0))
        if "depth" in mods:
            write_pfm(out / f"{name}_depth.pfm", frame.depth)
        if "normal" in mods:
            write_pfm(out / f"{name}_normal.pfm", frame.normals)
        if "k" in mods:
            write_pfm(out / f"{name}_k.pfm", frame.k_map)
        if "sem" in mods:
            if scene.num_classes:
                labels = np.argmax(frame.semantics, axis=-1)
                write_png(out / f"{name}_sem.png", PALETTE[labels % len(PALETTE)])
            else:
                log.warning("scene has no semantic channels; skipping sem for %s", name)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    scene = load_scene_ply(args.scene)
    ds = load_dataset(args.data)
    report = {"metrics": evaluate_scene(scene, ds, args.split, cfg).as_dict(), "outliers": None}
    if len(ds.points) and len(scene):
        pred = sample_scene_points(scene, len(ds.points), seed=args.seed)
        report["outliers"] = zscore_outliers(pred, ds.points, args.tau).as_dict()
    _dump(report, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    names = args.suites.split(",") if args.suites else list(gradcheck.SUITES)
    unknown = set(names) - set(gradcheck.SUITES)
    if unknown:
        raise UsageError(f"unknown suites {sorted(unknown)}; choose from {', '.join(gradcheck.SUITES)}")
    ok = True
    for res in gradcheck.run_all(args.seed, args.cases, names):
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:14s} max rel err {res.max_rel:.3e}  (< {res.threshold:.0e})  "
              f"checked {res.checked}  excluded {res.excluded}  {status}")
        ok &= res.passed
    return 0 if ok else 1


def prune_histogram(k: np.ndarray, tk: float, inverted: bool = False) -> dict:
    dev = np.abs(np.asarray(k, float) - 1.0)
    counts, _ = np.histogram(dev, bins=np.array(HIST_BINS))
    labels = [f"[{lo:g}, {hi:g})" for lo, hi in zip(HIST_BINS[:-1], HIST_BINS[1:])]
    return {"count": int(dev.size), "threshold": tk, "inverted": inverted,
            "histogram": dict(zip(labels, counts.tolist())),
            "would_prune": int(np.sum(dev < tk if inverted else dev > tk))}


def cmd_prune_report(args) -> int:
    scene = load_scene_ply(args.scene)
    rep = prune_histogram(scene.grad_factor, args.tk, args.inverted)
    print(f"{rep['count']} Gaussians, |k-1| histogram:")
    for label, c in rep["histogram"].items():
        print(f"  {label:>12s} {c}")
    rule = "<" if args.inverted else ">"
    print(f"would prune {rep['would_prune']} with |k-1| {rule} {args.tk}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multisplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a scene on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--deterministic", action="store_true", help="omit wall-clock fields from the log")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render modalities for every camera")
    r.add_argument("--scene", required=True)
    r.add_argument("--cameras", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--modalities", default=",".join(MODALITIES))
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="image, geometry and semantic metrics")
    e.add_argument("--scene", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="test")
    e.add_argument("--tau", type=float, default=0.1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", type=int, default=3)
    g.add_argument("--suites", help=f"comma list of {', '.join(gradcheck.SUITES)}")
    g.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("prune-report", help="histogram of |k-1| and would-prune count")
    k.add_argument("--scene", required=True)
    k.add_argument("--tk", type=float, default=0.5)
    k.add_argument("--inverted", action="store_true")
    k.set_defaults(func=cmd_prune_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (OSError, ValueError, FloatingPointError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
