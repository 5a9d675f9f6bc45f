"""Joint multi-view latent layout: image, depth and ray channel groups.

A joint latent is a ``K x (2n + 6) x h x w`` array.  Channels ``[0, n)`` hold the
image latent, ``[n, 2n)`` the depth latent and ``[2n, 2n + 6)`` the Plücker ray
(direction then moment).  The encoder is a fixed 8x area average, so every
latent value is a closed-form function of the input frames.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .rays import PluckerRayGrid, poses_from_json, poses_to_json

DOWNSAMPLE = 8
IMAGE_CHANNELS = 3
RAY_CHANNELS = 6


@dataclass
class JointLatent:
    data: np.ndarray
    n: int = IMAGE_CHANNELS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 4:
            raise ValueError(f"joint latent must be K x C x h x w, got shape {self.data.shape}")
        if self.data.shape[1] != 2 * self.n + RAY_CHANNELS:
            raise ValueError(
                f"channel count {self.data.shape[1]} does not match 2n+6 with n={self.n}"
            )

    @property
    def groups(self) -> dict:
        n = self.n
        return {"image": slice(0, n), "depth": slice(n, 2 * n), "ray": slice(2 * n, 2 * n + 6)}

    @property
    def image(self):
        return self.data[:, : self.n]

    @property
    def depth(self):
        return self.data[:, self.n : 2 * self.n]

    @property
    def ray(self):
        return self.data[:, 2 * self.n :]

    @property
    def views(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "JointLatent":
        return JointLatent(self.data.copy(), self.n)


@dataclass
class LatentMask:
    """1 marks known entries; shape matches the joint latent."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=float)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be exactly 0 or 1")

    @classmethod
    def from_groups(cls, views: int, n: int, h: int, w: int, known: dict) -> "LatentMask":
        """Whole-group mask; ``known`` maps group name to the view indices that are known."""
        mask = np.zeros((views, 2 * n + 6, h, w))
        ranges = {"image": (0, n), "depth": (n, 2 * n), "ray": (2 * n, 2 * n + 6)}
        for group, idx in known.items():
            lo, hi = ranges[group]
            for k in idx:
                mask[k, lo:hi] = 1.0
        return cls(mask)


@dataclass(frozen=True)
class SceneCondition:
    """Fixed-length scene descriptor standing in for a text prompt."""

    descriptor: np.ndarray
    null: bool = False

    def __post_init__(self):
        d = np.asarray(self.descriptor, dtype=float).reshape(-1)
        if not np.all(np.isfinite(d)):
            raise ValueError("condition descriptor must be finite")
        if self.null and np.any(d != 0):
            raise ValueError("the null condition has an all-zero descriptor")
        object.__setattr__(self, "descriptor", d)

    @classmethod
    def null_like(cls, size: int) -> "SceneCondition":
        return cls(np.zeros(size), null=True)

    def __eq__(self, other):
        return (
            isinstance(other, SceneCondition)
            and self.null == other.null
            and np.array_equal(self.descriptor, other.descriptor)
        )

    __hash__ = None


def _area_average(x, factor=DOWNSAMPLE):
    H, W = x.shape[:2]
    if H % factor or W % factor:
        raise ValueError(f"frame size {H}x{W} is not a multiple of {factor}")
    return x.reshape(H // factor, factor, W // factor, factor, *x.shape[2:]).mean(axis=(1, 3))


def encode_image(image) -> np.ndarray:
    """H x W x 3 RGB in [0, 1] -> 3 x H/8 x W/8 latent in [-1, 1]."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    return (2 * _area_average(image) - 1).transpose(2, 0, 1)


def decode_image(latent) -> np.ndarray:
    latent = np.asarray(latent, dtype=float)
    rgb = np.clip((latent.transpose(1, 2, 0) + 1) / 2, 0.0, 1.0)
    return rgb.repeat(DOWNSAMPLE, axis=0).repeat(DOWNSAMPLE, axis=1)


def normalize_depth(depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("depths must be finite and positive")
    lo, hi = depth.min(), depth.max()
    if hi - lo <= 0:
        return np.zeros_like(depth)
    return 2 * (depth - lo) / (hi - lo) - 1


def encode_depth(depth) -> np.ndarray:
    """Per-view min-max to [-1, 1], stacked as three channels, then 8x area average."""
    norm = normalize_depth(depth)
    lat = _area_average(norm)
    return np.repeat(lat[None], IMAGE_CHANNELS, axis=0)


def decode_depth(latent) -> np.ndarray:
    """Relative depth in [-1, 1] at frame resolution (channel mean, nearest upsample)."""
    d = np.asarray(latent, dtype=float).mean(axis=0)
    return d.repeat(DOWNSAMPLE, axis=0).repeat(DOWNSAMPLE, axis=1)


def assemble(images, depths, rays) -> JointLatent:
    images, depths = list(images), list(depths)
    rays = list(rays)
    if not (len(images) == len(depths) == len(rays)):
        raise ValueError("need one image, depth and ray grid per view")
    views = []
    for img, dep, ray in zip(images, depths, rays):
        img, dep = np.asarray(img, dtype=float), np.asarray(dep, dtype=float)
        ch = ray.to_channels() if isinstance(ray, PluckerRayGrid) else np.asarray(ray, dtype=float)
        if img.shape != dep.shape or img.shape[1:] != ch.shape[1:]:
            raise ValueError(
                f"shape mismatch: image {img.shape}, depth {dep.shape}, ray {ch.shape}"
            )
        views.append(np.concatenate([img, dep, ch], axis=0))
    return JointLatent(np.stack(views), n=images[0].shape[0])


def split(joint: JointLatent):
    return joint.image, joint.depth, joint.ray


def merge_masked(known, unknown, mask):
    """Elementwise ``mask * known + (1 - mask) * unknown`` (accepts arrays or wrappers)."""
    m = mask.mask if isinstance(mask, LatentMask) else np.asarray(mask, dtype=float)
    k = known.data if isinstance(known, JointLatent) else np.asarray(known, dtype=float)
    u = unknown.data if isinstance(unknown, JointLatent) else np.asarray(unknown, dtype=float)
    if not (k.shape == u.shape == m.shape):
        raise ValueError(f"shape mismatch: known {k.shape}, unknown {u.shape}, mask {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask entries must be exactly 0 or 1")
    out = np.where(m == 1, k, u)
    if isinstance(known, JointLatent):
        return JointLatent(out, known.n)
    return out


# -- latent archive -------------------------------------------------------------

_MAGIC = b"SFLT"
_VERSION = 1


def save_latent(path, joint: JointLatent, poses=None, condition: SceneCondition | None = None):
    """Binary payload plus a ``.json`` sidecar holding poses and the condition."""
    K, C, h, w = joint.data.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<5I", _VERSION, K, joint.n, h, w))
        fh.write(joint.data.astype("<f4").tobytes())
    side = {"version": _VERSION}
    if poses is not None:
        side["poses"] = json.loads(poses_to_json(poses))
    if condition is not None:
        side["condition"] = {"descriptor": condition.descriptor.tolist(), "null": condition.null}
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=1)


def load_latent(path):
    """Returns (JointLatent, poses or None, SceneCondition or None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a latent archive")
        version, K, n, h, w = struct.unpack("<5I", fh.read(20))
        if version != _VERSION:
            raise ValueError(f"unsupported latent archive version {version}")
        count = K * (2 * n + 6) * h * w
        data = np.frombuffer(fh.read(4 * count), dtype="<f4")
        if data.size != count:
            raise ValueError("truncated latent archive")
    joint = JointLatent(data.reshape(K, 2 * n + 6, h, w).astype(float), n)
    poses = condition = None
    try:
        with open(str(path) + ".json") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        side = {}
    if "poses" in side:
        poses = poses_from_json(json.dumps(side["poses"]))
    if "condition" in side:
        c = side["condition"]
        condition = SceneCondition(np.array(c["descriptor"]), bool(c["null"]))
    return joint, poses, condition
