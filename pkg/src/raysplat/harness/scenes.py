"""Procedural multi-view scenes with exact ground truth.

Every scene is a Gaussian cloud made of a fixed studio (a hue-wheel backdrop
ring and a floor) plus 3-20 object primitives.  Frames and depth maps are
renders of that cloud, so appearance, depth and camera supervision are exact.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from ..gsplat.cloud import GaussianCloud
from ..gsplat.render import render, render_depth
from ..latent import SceneCondition, assemble, encode_depth, encode_image, JointLatent
from ..rays import CameraIntrinsics, CameraPose, look_at, pose_to_rays

PALETTE = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.85, 0.15, 0.8),
    "cyan": (0.1, 0.85, 0.9),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.95, 0.5, 0.05),
}
PALETTE_NAMES = list(PALETTE)
COND_DIM = len(PALETTE) + 2


@dataclass
class SceneConfig:
    views: int = 8
    image_size: int = 64
    fov_deg: float = 60.0
    min_primitives: int = 3
    max_primitives: int = 20
    object_fraction: float = 0.75
    orbit_radius: tuple = (2.6, 3.4)
    orbit_elevation_deg: tuple = (5.0, 35.0)
    orbit_step_deg: tuple = (20.0, 40.0)
    jitter_deg: float = 2.0
    line_half_length: tuple = (1.0, 2.0)
    far: float = 12.0
    novel_views: int = 2


@dataclass
class ToyScene:
    seed: int
    kind: str
    cloud: GaussianCloud
    object_mask: np.ndarray
    poses: list
    condition: SceneCondition
    dominant: str
    images: np.ndarray
    depths: np.ndarray
    scale: float
    novel_poses: list = field(default_factory=list)
    novel_images: np.ndarray | None = None
    novel_depths: np.ndarray | None = None

    def latent(self, h=None) -> JointLatent:
        size = self.images.shape[1]
        h = h or size // 8
        return assemble(
            [encode_image(im) for im in self.images],
            [encode_depth(d) for d in self.depths],
            [pose_to_rays(p, h, h) for p in self.poses],
        )


def condition_for(dominant: str, kind: str, count: int) -> SceneCondition:
    d = np.zeros(COND_DIM)
    d[PALETTE_NAMES.index(dominant)] = 1.0
    d[len(PALETTE)] = 1.0 if kind == "object" else -1.0
    d[len(PALETTE) + 1] = count / 20.0
    return SceneCondition(d)


def _studio():
    mus, scales, colors = [], [], []
    for az in np.arange(0, 360, 10):
        a = np.deg2rad(az)
        rgb = colorsys.hsv_to_rgb(az / 360.0, 0.75, 0.85)
        for z in (-0.5, 0.5, 1.5, 2.5, 3.5):
            mus.append((6.0 * np.cos(a), 6.0 * np.sin(a), z))
            scales.append((0.45, 0.45, 0.45))
            colors.append(rgb)
    for x in np.arange(-4.5, 4.6, 1.0):
        for y in np.arange(-4.5, 4.6, 1.0):
            if x * x + y * y > 4.6**2:
                continue
            mus.append((x, y, -0.7))
            scales.append((0.42, 0.42, 0.04))
            # tiles carry the hue of their azimuth so the floor alone fixes heading
            hue = (np.degrees(np.arctan2(y, x)) % 360) / 360.0
            val = 0.6 if (int(np.floor(x)) + int(np.floor(y))) % 2 == 0 else 0.4
            colors.append(colorsys.hsv_to_rgb(hue, 0.6 if x * x + y * y > 0.5 else 0.0, val))
    G = len(mus)
    return GaussianCloud(mus, np.full(G, 0.9), scales, None, colors)


_STUDIO = None


def studio() -> GaussianCloud:
    global _STUDIO
    if _STUDIO is None:
        _STUDIO = _studio()
    return _STUDIO


def _random_quaternion(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _primitives(rng, kind, count, dominant):
    mus, scales, rots, colors = [], [], [], []
    for _ in range(count):
        name = dominant if rng.random() < 0.7 else PALETTE_NAMES[rng.integers(len(PALETTE))]
        rgb = np.array(PALETTE[name])
        if kind == "object":
            center = rng.uniform(-0.6, 0.6, 3) * np.array([1, 1, 0.8]) + np.array([0, 0, 0.1])
        else:
            center = np.array([rng.uniform(-3, 3), rng.uniform(-1.0, 3.0), rng.uniform(-0.5, 0.9)])
        size = rng.uniform(0.12, 0.3)
        shape = rng.integers(3)
        if shape == 0:  # blob
            mus.append(center)
            scales.append(np.full(3, size))
            rots.append((1.0, 0.0, 0.0, 0.0))
            colors.append(rgb)
        elif shape == 1:  # ellipsoid
            mus.append(center)
            scales.append(size * rng.uniform(0.4, 1.6, 3))
            rots.append(_random_quaternion(rng))
            colors.append(rgb)
        else:  # bar of blobs
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            for k in range(-1, 2):
                mus.append(center + k * 1.2 * size * direction)
                scales.append(np.full(3, 0.7 * size))
                rots.append((1.0, 0.0, 0.0, 0.0))
                colors.append(rgb)
    G = len(mus)
    return GaussianCloud(mus, np.full(G, 0.95), scales, rots, colors)


def orbit_poses(rng, config: SceneConfig, intrinsics, views=None):
    views = views or config.views
    radius = rng.uniform(*config.orbit_radius)
    elev = rng.uniform(*config.orbit_elevation_deg)
    az0 = rng.uniform(0, 360)
    step = rng.uniform(*config.orbit_step_deg) * rng.choice([-1.0, 1.0])
    target = rng.normal(0, 0.05, 3)
    poses = []
    for k in range(views):
        az = np.deg2rad(az0 + k * step + rng.normal(0, config.jitter_deg / 2))
        el = np.deg2rad(elev + rng.normal(0, config.jitter_deg / 2))
        r = radius + rng.normal(0, 0.03)
        c = r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(c, target, intrinsics))
    params = {"radius": radius, "elevation": elev, "azimuth0": az0, "step": step,
              "targets": [target] * views}
    return poses, params


def line_poses(rng, config: SceneConfig, intrinsics, views=None):
    views = views or config.views
    half = rng.uniform(*config.line_half_length)
    y0 = rng.uniform(-4.0, -3.2)
    z0 = rng.uniform(0.3, 0.9)
    sign = rng.choice([-1.0, 1.0])
    poses, targets = [], []
    for k in range(views):
        x = sign * (-half + 2 * half * k / max(views - 1, 1))
        c = np.array([x, y0, z0]) + rng.normal(0, 0.02, 3)
        target = c + np.array([rng.normal(0, 0.08), 3.0, -0.4 + rng.normal(0, 0.05)])
        poses.append(look_at(c, target, intrinsics))
        targets.append(target)
    return poses, {"half_length": half, "targets": targets}


def _between(poses, rng, count, intrinsics):
    """Extra cameras halfway between consecutive trajectory views."""
    out = []
    for j in rng.choice(len(poses) - 1, size=count, replace=False):
        c = (poses[j].center + poses[j + 1].center) / 2
        f = poses[j].R[2] + poses[j + 1].R[2]
        out.append(look_at(c, c + f, intrinsics))
    return out


def generate_scene(seed: int, config: SceneConfig | None = None, kind: str | None = None) -> ToyScene:
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = "object" if rng.random() < config.object_fraction else "scenery"
    count = int(rng.integers(config.min_primitives, config.max_primitives + 1))
    dominant = PALETTE_NAMES[rng.integers(len(PALETTE))]
    objects = _primitives(rng, kind, count, dominant)
    cloud = GaussianCloud.concat([studio(), objects])
    object_mask = np.zeros(len(cloud), dtype=bool)
    object_mask[len(studio()):] = True
    K = CameraIntrinsics.from_fov(config.fov_deg)
    traj = orbit_poses if kind == "object" else line_poses
    poses, params = traj(rng, config, K)
    # viewing radius: mean camera-to-target distance (the orbit radius for orbits)
    scale = np.mean([np.linalg.norm(p.center - t) for p, t in zip(poses, params["targets"])])
    novel = _between(poses, rng, config.novel_views, K) if config.novel_views else []
    size = config.image_size
    images, depths = _render_views(cloud, poses, size, config.far)
    scene = ToyScene(
        seed=seed,
        kind=kind,
        cloud=cloud,
        object_mask=object_mask,
        poses=poses,
        condition=condition_for(dominant, kind, count),
        dominant=dominant,
        images=images,
        depths=depths,
        scale=float(scale),
        novel_poses=novel,
    )
    if novel:
        scene.novel_images, scene.novel_depths = _render_views(cloud, novel, size, config.far)
    return scene


def _render_views(cloud, poses, size, far):
    images = np.stack([render(cloud, p, size, size)[0] for p in poses])
    depths = np.stack([render_depth(cloud, p, size, size, far) for p in poses])
    return np.clip(images, 0.0, 1.0), depths


def object_pixel_masks(scene: ToyScene, size=None) -> np.ndarray:
    """Per-view boolean masks of pixels dominated by object primitives."""
    size = size or scene.images.shape[1]
    objects = scene.cloud.subset(scene.object_mask)
    return np.stack([render(objects, p, size, size)[1] > 0.5 for p in scene.poses])


def recolor(scene: ToyScene, dominant: str) -> ToyScene:
    """Same geometry and cameras with the dominant object color swapped."""
    cloud = scene.cloud.subset(np.arange(len(scene.cloud)))
    old = np.array(PALETTE[scene.dominant])
    hit = scene.object_mask & np.all(np.isclose(cloud.color, old), axis=1)
    cloud.color[hit] = PALETTE[dominant]
    size = scene.images.shape[1]
    images, depths = _render_views(cloud, scene.poses, size, float(scene.depths.max()))
    count = int(round(scene.condition.descriptor[len(PALETTE) + 1] * 20))
    return ToyScene(
        scene.seed, scene.kind, cloud, scene.object_mask, scene.poses,
        condition_for(dominant, scene.kind, count), dominant, images, scene.depths, scene.scale,
    )


def build_dataset(seeds, config: SceneConfig | None = None, kind=None):
    """(latents S x K x C x h x w, conditions S x COND_DIM, scenes)."""
    scenes = [generate_scene(int(s), config, kind) for s in seeds]
    latents = np.stack([s.latent().data for s in scenes])
    conds = np.stack([s.condition.descriptor for s in scenes])
    return latents, conds, scenes
