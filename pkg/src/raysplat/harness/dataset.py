"""Scene directories on disk: frames/*.png, depth/*.pfm, poses.json, condition.json.

Novel (held-out between-view) cameras go to ``novel/`` with the same layout, and
per-view object masks (for object editing) to ``masks/*.png``.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..latent import SceneCondition, assemble, encode_depth, encode_image
from ..rays import load_poses, pose_to_rays, save_poses


def write_png(path, image):
    arr = np.clip(np.round(np.asarray(image, dtype=float) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def write_pfm(path, depth):
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(depth).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: only single-channel PFM is supported")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PFM")
    return np.flipud(data.reshape(h, w)).astype(float)


def _write_views(root: Path, images, depths, poses):
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    for k, (im, d) in enumerate(zip(images, depths)):
        write_png(root / "frames" / f"{k:03d}.png", im)
        write_pfm(root / "depth" / f"{k:03d}.pfm", d)
    save_poses(root / "poses.json", poses)


def _numbered(folder: Path, suffix):
    return sorted(p for p in folder.glob(f"*{suffix}") if re.fullmatch(r"\d+", p.stem))


def read_frames(folder) -> np.ndarray:
    files = _numbered(Path(folder), ".png")
    if not files:
        raise FileNotFoundError(f"no numbered PNG frames in {folder}")
    return np.stack([read_png(f) for f in files])


def read_depths(folder) -> np.ndarray:
    files = _numbered(Path(folder), ".pfm")
    if not files:
        raise FileNotFoundError(f"no numbered PFM depth maps in {folder}")
    return np.stack([read_pfm(f) for f in files])


def save_scene(root, scene):
    root = Path(root)
    _write_views(root, scene.images, scene.depths, scene.poses)
    if scene.novel_poses:
        _write_views(root / "novel", scene.novel_images, scene.novel_depths, scene.novel_poses)
    if getattr(scene, "cloud", None) is not None:
        from .scenes import object_pixel_masks

        (root / "masks").mkdir(exist_ok=True)
        for k, m in enumerate(object_pixel_masks(scene)):
            write_png(root / "masks" / f"{k:03d}.png", np.repeat(m[..., None], 3, axis=2).astype(float))
    meta = {
        "seed": scene.seed,
        "kind": scene.kind,
        "dominant": scene.dominant,
        "scale": scene.scale,
        "descriptor": scene.condition.descriptor.tolist(),
    }
    with open(root / "condition.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


@dataclass
class SceneRecord:
    """A scene as read back from disk (no Gaussian cloud)."""

    seed: int
    kind: str
    dominant: str
    scale: float
    condition: SceneCondition
    images: np.ndarray
    depths: np.ndarray
    poses: list
    novel_images: np.ndarray | None = None
    novel_depths: np.ndarray | None = None
    novel_poses: list | None = None

    def latent(self, h=None):
        size = self.images.shape[1]
        h = h or size // 8
        return assemble(
            [encode_image(im) for im in self.images],
            [encode_depth(d) for d in self.depths],
            [pose_to_rays(p, h, h) for p in self.poses],
        )


def load_scene(root) -> SceneRecord:
    root = Path(root)
    with open(root / "condition.json") as fh:
        meta = json.load(fh)
    rec = SceneRecord(
        seed=int(meta["seed"]),
        kind=meta["kind"],
        dominant=meta["dominant"],
        scale=float(meta["scale"]),
        condition=SceneCondition(np.array(meta["descriptor"])),
        images=read_frames(root / "frames"),
        depths=read_depths(root / "depth"),
        poses=load_poses(root / "poses.json"),
    )
    if (root / "novel").is_dir():
        rec.novel_images = read_frames(root / "novel" / "frames")
        rec.novel_depths = read_depths(root / "novel" / "depth")
        rec.novel_poses = load_poses(root / "novel" / "poses.json")
    return rec


def scene_dirs(root):
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "condition.json").is_file())
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {root}")
    return dirs


def write_dataset(root, scenes):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        save_scene(root / f"scene_{s.seed:05d}", s)
    return root


def load_dataset(root):
    """(latents S x K x C x h x w, conditions S x D, records)."""
    records = [load_scene(d) for d in scene_dirs(root)]
    latents = np.stack([r.latent().data for r in records])
    conds = np.stack([r.condition.descriptor for r in records])
    return latents, conds, records


def default_output_root():
    return Path(os.environ.get("RAYSPLAT_OUTPUT", "outputs"))
