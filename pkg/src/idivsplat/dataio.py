"""Datasets, image files (PNG, PFM) and evaluation reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, is_rotation

SCHEMA_VERSION = 1
TEST_EVERY = 8


class ManifestError(ValueError):
    """The manifest is not valid JSON or does not follow the schema."""


class MissingFileError(FileNotFoundError):
    """A file referenced by the manifest does not exist."""


class CameraError(ValueError):
    """A camera in the manifest has an invalid pose."""


# --------------------------------------------------------------------------
# image formats
# --------------------------------------------------------------------------

def quantize(x, gamma=1.0):
    """Float values in [0, 1] to uint8 with round-half-up."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if gamma != 1.0:
        x = x ** (1.0 / gamma)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def save_png(path, image, gamma=1.0):
    Image.fromarray(quantize(image, gamma)).save(path, format="PNG")


def load_png(path, gamma=1.0):
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return a ** gamma if gamma != 1.0 else a


def normal_to_rgb(normal):
    """Map unit normals in [-1, 1]^3 to 8-bit RGB."""
    return quantize(0.5 * (np.asarray(normal, dtype=np.float64) + 1.0))


def save_pfm(path, data):
    """Little-endian PFM (scale -1.0), rows stored bottom to top, float32."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {a.shape}")
    H, W = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def load_pfm(path):
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        W, H = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        shape = (H, W, 3) if tag == b"PF" else (H, W)
        a = np.frombuffer(f.read(), dtype=dtype, count=int(np.prod(shape))).reshape(shape)
    return a[::-1].astype(np.float32)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    cameras: list
    images: list
    split: list
    seed_points: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    depths: list | None = None
    normals: list | None = None   # world-space, zero on background
    gamma: float = 1.0
    image_paths: list | None = None

    def indices(self, split):
        if split == "all":
            return list(range(len(self.cameras)))
        return [i for i, s in enumerate(self.split) if s == split]

    def train_views(self):
        return [(self.cameras[i], self.images[i]) for i in self.indices("train")]


def every_nth_split(n_views, every=TEST_EVERY):
    return ["test" if i % every == 0 else "train" for i in range(n_views)]


def dataset_from_scene(scene, split=None) -> Dataset:
    n = scene.n_views
    return Dataset(list(scene.cameras), [im for im in scene.images],
                   list(split) if split is not None else every_nth_split(n), scene.seed_points,
                   np.asarray(scene.background, dtype=np.float64),
                   [d for d in scene.depths], [m for m in scene.normals])


def save_dataset(dataset: Dataset, directory, extra=None):
    """Write images, ground-truth maps and ``manifest.json`` under ``directory``."""
    root = Path(directory)
    for sub in ("images", "depth", "normal"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    views = []
    for i, cam in enumerate(dataset.cameras):
        v = {"image": f"images/{i:03d}.png", "camera": cam.to_dict(), "split": dataset.split[i]}
        save_png(root / v["image"], dataset.images[i], dataset.gamma)
        if dataset.depths is not None:
            v["depth"] = f"depth/{i:03d}.pfm"
            save_pfm(root / v["depth"], dataset.depths[i])
        if dataset.normals is not None:
            v["normal"] = f"normal/{i:03d}.pfm"
            save_pfm(root / v["normal"], dataset.normals[i])
        views.append(v)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "gamma": dataset.gamma,
        "background": np.asarray(dataset.background, float).tolist(),
        "seed_points": np.asarray(dataset.seed_points, float).tolist(),
        "views": views,
    }
    if extra:
        manifest["extra"] = extra
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _manifest_path(path):
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def load_dataset(path) -> Dataset:
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise MissingFileError(f"manifest not found: {mpath}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{mpath}: malformed JSON ({e})") from e
    if not isinstance(m, dict):
        raise ManifestError(f"{mpath}: top level must be an object")
    if m.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"{mpath}: schema_version {m.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    views = m.get("views")
    if not isinstance(views, list) or not views:
        raise ManifestError(f"{mpath}: 'views' must be a non-empty list")
    root = mpath.parent
    gamma = float(m.get("gamma", 1.0))
    cams, images, split, depths, normals, paths = [], [], [], [], [], []
    for i, v in enumerate(views):
        try:
            image, cd, s = v["image"], v["camera"], v.get("split", "train")
            R = np.asarray(cd["R"], dtype=np.float64)
        except (KeyError, TypeError) as e:
            raise ManifestError(f"{mpath}: view {i} lacks field {e}") from e
        if s not in ("train", "test"):
            raise ManifestError(f"{mpath}: view {i} has split {s!r}")
        if R.shape != (3, 3) or not is_rotation(R):
            raise CameraError(f"{mpath}: view {i} camera rotation is not orthonormal")
        for key in ("image", "depth", "normal"):
            if key in v and not (root / v[key]).exists():
                raise MissingFileError(f"missing file referenced by view {i}: {root / v[key]}")
        try:
            cams.append(Camera.from_dict(cd))
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{mpath}: view {i} camera is invalid ({e})") from e
        images.append(load_png(root / image, gamma))
        paths.append(str(root / image))
        split.append(s)
        depths.append(load_pfm(root / v["depth"]).astype(np.float64) if "depth" in v else None)
        normals.append(load_pfm(root / v["normal"]).astype(np.float64) if "normal" in v else None)
    seeds = np.asarray(m.get("seed_points", []), dtype=np.float64).reshape(-1, 3)
    return Dataset(cams, images, split, seeds, np.asarray(m.get("background", [0, 0, 0]), float),
                   depths if any(d is not None for d in depths) else None,
                   normals if any(n is not None for n in normals) else None, gamma, paths)


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def write_images(output, directory, prefix="", gamma=1.0):
    """color.png, depth.pfm, normal.pfm and normal.png for one RenderOutput."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {d}: {e}") from e
    for name, buf in (("color", output.color), ("depth", output.depth), ("normal", output.normal)):
        if not np.all(np.isfinite(buf)):
            raise ValueError(f"{name} buffer has non-finite values")
    files = {
        "color": d / f"{prefix}color.png",
        "depth": d / f"{prefix}depth.pfm",
        "normal": d / f"{prefix}normal.pfm",
        "normal_vis": d / f"{prefix}normal.png",
    }
    save_png(files["color"], output.color, gamma)
    save_pfm(files["depth"], output.depth)
    save_pfm(files["normal"], output.normal)
    Image.fromarray(normal_to_rgb(output.normal)).save(files["normal_vis"], format="PNG")
    return files


def rendered_normal_mae(out, cam, gt_normal_world, alpha_min=0.5):
    """Angle between the rendered normal map (rotated to world) and ground truth,
    over pixels that are opaque in the render and covered in the ground truth."""
    from .oracle import normal_mae

    world = out.normal @ cam.R
    gt = np.asarray(gt_normal_world, dtype=np.float64)
    mask = (out.alpha > alpha_min) & (np.linalg.norm(gt, axis=-1) > 0.5) \
        & (np.linalg.norm(world, axis=-1) > 0.5)
    return normal_mae(world, gt, mask)


def eval_metrics(model, dataset: Dataset, split="test", workers=None, image_dir=None) -> dict:
    """Mean PSNR, SSIM and normal MAE over one split."""
    from .losses import psnr, ssim
    from .pipeline import render_view

    idx = dataset.indices(split)
    if not idx:
        raise ValueError(f"split {split!r} has no views")
    per_view = []
    for i in idx:
        cam = dataset.cameras[i]
        out, _ = render_view(model, cam, dataset.background, workers=workers)
        entry = {"view": i, "psnr": psnr(out.color, dataset.images[i]),
                 "ssim": ssim(out.color, dataset.images[i])}
        if dataset.normals is not None and dataset.normals[i] is not None:
            entry["normal_mae"] = rendered_normal_mae(out, cam, dataset.normals[i])
        per_view.append(entry)
        if image_dir is not None:
            write_images(out, image_dir, prefix=f"{i:03d}_", gamma=dataset.gamma)
    maes = [v["normal_mae"] for v in per_view if "normal_mae" in v and np.isfinite(v["normal_mae"])]
    return {
        "split": split,
        "n_views": len(idx),
        "psnr": float(np.mean([v["psnr"] for v in per_view])),
        "ssim": float(np.mean([v["ssim"] for v in per_view])),
        "normal_mae": float(np.mean(maes)) if maes else None,
        "per_view": per_view,
    }


def metrics_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)


def format_metrics(report: dict) -> str:
    mae = report["normal_mae"]
    lines = [f"{'split':<8}{'views':>6}{'PSNR':>10}{'SSIM':>9}{'MAE(deg)':>10}",
             f"{report['split']:<8}{report['n_views']:>6}{report['psnr']:>10.3f}{report['ssim']:>9.4f}"
             f"{('absent' if mae is None else f'{mae:.2f}'):>10}"]
    return "\n".join(lines)
