"""Dataset manifest, image codecs, splat PLY files and config loading."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .camera import CameraView
from .config import TrainConfig
from .scene import K_RESET, Scene, num_sh_coeffs, quat_to_rotmat

log = logging.getLogger(__name__)

MODALITIES = ("rgb", "depth", "normal", "sem")


class FormatError(ValueError):
    """Malformed file; the message names the file and, when known, the byte offset."""


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; ``data`` is (H, W) or (H, W, 3), top row first."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        kind = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {data.shape}")
    H, W = data.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def _header_line(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError(f"{path}: truncated header at byte {pos}")
    return buf[pos:end].strip(), end + 1


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    kind, pos = _header_line(buf, 0, path)
    if kind not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: bad PFM magic {kind[:8]!r} at byte 0")
    channels = 3 if kind == b"PF" else 1
    dims_at = pos
    dims, pos = _header_line(buf, pos, path)
    try:
        W, H = (int(x) for x in dims.split())
    except ValueError:
        raise FormatError(f"{path}: bad PFM dimensions {dims!r} at byte {dims_at}") from None
    if W < 1 or H < 1:
        raise FormatError(f"{path}: bad PFM dimensions {W}x{H} at byte {dims_at}")
    scale_at = pos
    scale_line, pos = _header_line(buf, pos, path)
    try:
        scale = float(scale_line)
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale {scale_line!r} at byte {scale_at}") from None
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be nonzero (byte {scale_at})")
    dtype = "<f4" if scale < 0 else ">f4"
    need = W * H * channels * 4
    if len(buf) - pos < need:
        raise FormatError(f"{path}: expected {need} data bytes from byte {pos}, file has {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=dtype, count=W * H * channels, offset=pos)
    shape = (H, W) if channels == 1 else (H, W, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


# -- PNG ---------------------------------------------------------------------

def write_png(path, data: np.ndarray) -> None:
    """Float RGB in [0, 1] (H, W, 3) or uint8 (H, W[, 3])."""
    data = np.asarray(data)
    if data.dtype != np.uint8:
        data = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im).copy()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from None


def read_rgb(path) -> np.ndarray:
    img = read_png(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3].astype(np.float64) / 255.0


def read_labels(path) -> np.ndarray:
    img = read_png(path)
    if img.ndim != 2:
        raise FormatError(f"{path}: label image must be single channel, got shape {img.shape}")
    return img.astype(np.uint8)


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"f4": "float", "f8": "double", "u1": "uchar", "i4": "int"}


def write_ply(path, columns: dict[str, np.ndarray]) -> None:
    """Binary little-endian PLY with one vertex element; dtypes come from the arrays."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    dtype = np.dtype([(k, "<" + np.asarray(columns[k]).dtype.str[1:]) for k in names])
    rec = np.empty(n, dtype=dtype)
    for k in names:
        rec[k] = columns[k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for k in names:
        header.append(f"property {_PLY_NAMES[dtype[k].str[1:]]} {k}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"ply\n"):
        raise FormatError(f"{path}: bad PLY magic at byte 0")
    end = buf.find(b"end_header\n")
    if end < 0:
        raise FormatError(f"{path}: PLY header has no end_header")
    pos = end + len(b"end_header\n")
    props, n, element, fmt = [], None, None, None
    offset = 0
    for line in buf[:end].decode("ascii", errors="replace").split("\n"):
        parts = line.split()
        here = offset
        offset += len(line) + 1
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n = int(parts[2])
            elif int(parts[2]) != 0:
                raise FormatError(f"{path}: unsupported element {element!r} at byte {here}")
        elif parts[0] == "property" and element == "vertex":
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property {' '.join(parts[1:])!r} at byte {here}")
            props.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
        else:
            raise FormatError(f"{path}: unexpected header line {line!r} at byte {here}")
    if fmt != "binary_little_endian":
        raise FormatError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
    if n is None:
        raise FormatError(f"{path}: no vertex element")
    dtype = np.dtype(props)
    if len(buf) - pos < n * dtype.itemsize:
        raise FormatError(f"{path}: expected {n * dtype.itemsize} vertex bytes from byte {pos}, "
                          f"file has {len(buf) - pos}")
    rec = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    return {name: rec[name].copy() for name in dtype.names}


def scene_columns(scene: Scene, dtype=np.float64) -> dict[str, np.ndarray]:
    n = len(scene)
    cols = {"x": scene.means[:, 0], "y": scene.means[:, 1], "z": scene.means[:, 2]}
    for c in range(3):
        cols[f"f_dc_{c}"] = scene.sh[:, 0, c]
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (scene.sh.shape[1] - 1))  # channel-major
    for i in range(rest.shape[1]):
        cols[f"f_rest_{i}"] = rest[:, i]
    cols["opacity"] = scene.opacity_logits
    for i in range(3):
        cols[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = scene.quats[:, i]
    for i in range(scene.num_classes):
        cols[f"sem_{i}"] = scene.semantics[:, i]
    cols["grad_k"] = scene.grad_factor
    return {k: np.asarray(v, dtype=dtype) for k, v in cols.items()}


def save_scene_ply(scene: Scene, path, precision: str = "double") -> None:
    """'double' round-trips every bit; 'float' matches viewers that only read float32."""
    if precision not in ("float", "double"):
        raise ValueError("precision must be 'float' or 'double'")
    write_ply(path, scene_columns(scene, np.float32 if precision == "float" else np.float64))


_REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
_SILENT_EXTRA = {"nx", "ny", "nz"}


def load_scene_ply(path) -> Scene:
    cols = read_ply(path)
    missing = [k for k in _REQUIRED if k not in cols]
    if missing:
        raise FormatError(f"{path}: missing required properties {missing}")
    n = len(cols["x"])
    n_rest = 0
    while f"f_rest_{n_rest}" in cols:
        n_rest += 1
    if n_rest % 3:
        raise FormatError(f"{path}: f_rest count {n_rest} is not a multiple of 3")
    coeffs = n_rest // 3 + 1
    degree = int(round(np.sqrt(coeffs))) - 1
    if num_sh_coeffs(degree) != coeffs or degree > 3:
        raise FormatError(f"{path}: {n_rest} f_rest properties do not form an SH degree <= 3")
    n_sem = 0
    while f"sem_{n_sem}" in cols:
        n_sem += 1
    known = set(_REQUIRED) | {f"f_rest_{i}" for i in range(n_rest)} | {f"sem_{i}" for i in range(n_sem)}
    known |= {"grad_k"} | _SILENT_EXTRA
    extra = sorted(set(cols) - known)
    if extra:
        log.warning("%s: ignoring unknown properties %s", path, extra)

    def f64(k):
        return np.asarray(cols[k], dtype=np.float64)

    sh = np.zeros((n, coeffs, 3))
    for c in range(3):
        sh[:, 0, c] = f64(f"f_dc_{c}")
    if n_rest:
        rest = np.stack([f64(f"f_rest_{i}") for i in range(n_rest)], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, coeffs - 1).transpose(0, 2, 1)
    return Scene(
        means=np.stack([f64("x"), f64("y"), f64("z")], axis=1),
        quats=np.stack([f64(f"rot_{i}") for i in range(4)], axis=1),
        log_scales=np.stack([f64(f"scale_{i}") for i in range(3)], axis=1),
        opacity_logits=f64("opacity"),
        sh=sh,
        semantics=(np.stack([f64(f"sem_{i}") for i in range(n_sem)], axis=1) if n_sem else np.zeros((n, 0))),
        grad_factor=f64("grad_k") if "grad_k" in cols else np.full(n, K_RESET),
        num_classes=n_sem,
        sh_degree=degree,
    )


# -- dataset -----------------------------------------------------------------

@dataclass
class FrameData:
    name: str
    split: str
    rgb: np.ndarray | None = None  # (H, W, 3) float in [0, 1]
    depth: np.ndarray | None = None  # (H, W) meters, 0 = no data
    normal: np.ndarray | None = None  # (H, W, 3) world frame, 0 = no data
    sem: np.ndarray | None = None  # (H, W) uint8 class ids, 255 = unlabeled


@dataclass
class SceneDataset:
    views: list[CameraView]
    frames: list[FrameData]
    num_classes: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def split(self, name: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.split == name]

    @property
    def train(self) -> list[int]:
        return self.split("train")

    @property
    def test(self) -> list[int]:
        return self.split("test")


def _rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) of a rotation matrix (Shepperd's method)."""
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def load_cameras(path) -> tuple[dict, list[CameraView]]:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: {e}") from None
    try:
        views = []
        for fr in meta["frames"]:
            q = np.asarray(fr["q_cam_to_world"], dtype=np.float64)
            views.append(CameraView(float(meta["fx"]), float(meta["fy"]), float(meta["cx"]), float(meta["cy"]),
                                    int(meta["width"]), int(meta["height"]),
                                    quat_to_rotmat(q / np.linalg.norm(q)), fr["t_cam_to_world"]))
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: missing or malformed field {e}") from None
    return meta, views


def load_dataset(root, require=()) -> SceneDataset:
    """Load ``root/cameras.json`` and every file it references.

    ``require`` lists modalities every frame must provide (as needed by the
    enabled losses); a missing one is a hard error naming the file.
    """
    root = Path(root)
    meta, views = load_cameras(root / "cameras.json")
    W, H = int(meta["width"]), int(meta["height"])
    C = int(meta.get("num_classes", 0))
    readers = {"rgb": read_rgb, "depth": read_pfm, "normal": read_pfm, "sem": read_labels}
    shapes = {"rgb": (H, W, 3), "depth": (H, W), "normal": (H, W, 3), "sem": (H, W)}
    frames = []
    for i, fr in enumerate(meta["frames"]):
        data = FrameData(name=fr.get("name", f"{i:04d}"), split=fr.get("split", "train"))
        for mod in MODALITIES:
            rel = fr.get(mod)
            if rel is None:
                if mod in require:
                    raise FileNotFoundError(f"frame {i} has no {mod} file but it is required")
                continue
            fpath = root / rel
            if not fpath.exists():
                if mod in require:
                    raise FileNotFoundError(f"missing {mod} file {fpath}")
                log.warning("missing %s file %s", mod, fpath)
                continue
            arr = readers[mod](fpath)
            if arr.shape != shapes[mod]:
                raise FormatError(f"{fpath}: shape {arr.shape}, expected {shapes[mod]}")
            if mod == "depth":
                arr = arr.astype(np.float64)
                if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                    raise FormatError(f"{fpath}: depth must be finite and >= 0")
            elif mod == "normal":
                arr = arr.astype(np.float64)
            elif mod == "sem":
                bad = (arr != 255) & (arr >= C)
                if bad.any():
                    raise FormatError(f"{fpath}: label {int(arr[bad][0])} outside [0, {C})")
            setattr(data, mod, arr)
        frames.append(data)
    points = np.zeros((0, 3))
    colors = np.zeros((0, 3))
    if meta.get("points"):
        cols = read_ply(root / meta["points"])
        points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
        if "red" in cols:
            colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.float64) / 255.0
        else:
            colors = np.full_like(points, 0.5)
    return SceneDataset(views, frames, C, points, colors)


def save_dataset(ds: SceneDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    v0 = ds.views[0]
    meta = {"width": v0.width, "height": v0.height, "fx": v0.fx, "fy": v0.fy, "cx": v0.cx, "cy": v0.cy,
            "num_classes": ds.num_classes, "frames": []}
    for view, fr in zip(ds.views, ds.frames):
        entry = {"name": fr.name, "split": fr.split,
                 "q_cam_to_world": _rotation_to_quat(view.R).tolist(),
                 "t_cam_to_world": view.t.tolist()}
        if fr.rgb is not None:
            entry["rgb"] = f"rgb/{fr.name}.png"
            (root / "rgb").mkdir(exist_ok=True)
            write_png(root / entry["rgb"], fr.rgb)
        if fr.depth is not None:
            entry["depth"] = f"depth/{fr.name}.pfm"
            (root / "depth").mkdir(exist_ok=True)
            write_pfm(root / entry["depth"], fr.depth)
        if fr.normal is not None:
            entry["normal"] = f"normal/{fr.name}.pfm"
            (root / "normal").mkdir(exist_ok=True)
            write_pfm(root / entry["normal"], fr.normal)
        if fr.sem is not None:
            entry["sem"] = f"sem/{fr.name}.png"
            (root / "sem").mkdir(exist_ok=True)
            write_png(root / entry["sem"], np.asarray(fr.sem, dtype=np.uint8))
        meta["frames"].append(entry)
    if len(ds.points):
        meta["points"] = "points.ply"
        rgb = np.round(np.clip(ds.colors, 0, 1) * 255).astype(np.uint8)
        write_ply(root / "points.ply", {"x": ds.points[:, 0].astype(np.float32),
                                        "y": ds.points[:, 1].astype(np.float32),
                                        "z": ds.points[:, 2].astype(np.float32),
                                        "red": rgb[:, 0], "green": rgb[:, 1], "blue": rgb[:, 2]})
    (root / "cameras.json").write_text(json.dumps(meta, indent=1))


# -- config ------------------------------------------------------------------

def load_config(path) -> TrainConfig:
    """YAML mapping of :class:`TrainConfig` fields; an empty file means defaults."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ValueError(f"{path}: {e}") from None
    if data is not None and not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ValueError(f"{path}: {e}") from None


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def write_records(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
