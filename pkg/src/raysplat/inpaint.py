"""Inpainting with a joint flow model and the training-free tasks built on it.

Known latents are re-noised to the current time with fresh noise every step and
merged in through a 0/1 mask after the Euler update and the ray re-noising.
At ``t = 0`` the re-noising coefficient vanishes, so known entries come back
exactly.  Pose estimation, novel view synthesis and both editing modes differ
only in which channel groups of which views are known.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent import (
    DOWNSAMPLE,
    JointLatent,
    LatentMask,
    SceneCondition,
    assemble,
    decode_depth,
    decode_image,
    encode_depth,
    encode_image,
)
from .rays import RayRecoveryError, pose_to_rays
from .sampler import SamplerConfig, inpaint as _inpaint, resample_from

__all__ = [
    "InpaintProblem",
    "inpaint",
    "downsample_mask",
    "estimate_poses_task",
    "novel_view_task",
    "edit_object_task",
    "edit_stroke_task",
]


@dataclass
class InpaintProblem:
    known: JointLatent
    mask: LatentMask
    cond: SceneCondition | None
    cfg: SamplerConfig

    def __post_init__(self):
        if not isinstance(self.mask, LatentMask):
            self.mask = LatentMask(self.mask)
        if self.mask.mask.shape != self.known.data.shape:
            raise ValueError(
                f"mask shape {self.mask.mask.shape} does not match latent {self.known.data.shape}"
            )
        if not np.all(np.isfinite(self.known.data[self.mask.mask == 1])):
            raise ValueError("known latents must be finite where the mask is set")


def inpaint(model, problem: InpaintProblem, rng=None, trace=None):
    """Returns (JointLatent, poses recovered at the last ray update)."""
    return _inpaint(model, problem.known, problem.mask, problem.cond, problem.cfg, rng, trace)


def downsample_mask(mask) -> np.ndarray:
    """Pixel mask (H x W) -> latent grid by majority vote over each 8x8 block (ties count)."""
    mask = np.asarray(mask, dtype=float)
    H, W = mask.shape
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ValueError(f"mask size {H}x{W} is not a multiple of {DOWNSAMPLE}")
    frac = mask.reshape(H // DOWNSAMPLE, DOWNSAMPLE, W // DOWNSAMPLE, DOWNSAMPLE).mean(axis=(1, 3))
    return frac >= 0.5


def _check_distinct(latents):
    flat = latents.reshape(len(latents), -1)
    if len(flat) > 1 and np.all(np.ptp(flat, axis=0) == 0):
        raise RayRecoveryError("all input views are identical; relative poses are undetermined")


def estimate_poses_task(images, model, cfg: SamplerConfig, rng=None, depths=None, cond=None,
                        trace=None):
    """Camera poses for K frames; depths are optional and otherwise inpainted too."""
    images = np.asarray(images, dtype=float)
    K = len(images)
    img = np.stack([encode_image(im) for im in images])
    _check_distinct(img)
    n, h, w = img.shape[1:]
    dep = np.stack([encode_depth(d) for d in depths]) if depths is not None else np.zeros_like(img)
    known = JointLatent(np.concatenate([img, dep, np.zeros((K, 6, h, w))], axis=1), n)
    groups = {"image": range(K)}
    if depths is not None:
        groups["depth"] = range(K)
    mask = LatentMask.from_groups(K, n, h, w, groups)
    _, poses = inpaint(model, InpaintProblem(known, mask, cond, cfg), rng, trace)
    return poses


def novel_view_task(known_views: dict, target_poses, model, cfg: SamplerConfig, rng=None,
                    cond=None, latent_size=None, trace=None):
    """Fill image and depth for views not in ``known_views``.

    ``known_views`` maps a view index to ``(frame, depth)``; every one of the K
    slots gets its ray group from ``target_poses``.  Returns (frames, relative
    depths, joint latent), frames at full resolution.
    """
    K = len(target_poses)
    if not 1 <= len(known_views) <= K:
        raise ValueError("need between 1 and K known views")
    if any(not 0 <= k < K for k in known_views):
        raise ValueError("known view index out of range")
    sample = next(iter(known_views.values()))[0]
    size = latent_size or np.asarray(sample).shape[0] // DOWNSAMPLE
    n = 3
    data = np.zeros((K, 2 * n + 6, size, size))
    for k, pose in enumerate(target_poses):
        data[k, 2 * n :] = pose_to_rays(pose, size, size).to_channels()
    for k, (frame, depth) in known_views.items():
        data[k, :n] = encode_image(frame)
        data[k, n : 2 * n] = encode_depth(depth)
    known = JointLatent(data, n)
    mask = LatentMask.from_groups(
        K, n, size, size,
        {"image": list(known_views), "depth": list(known_views), "ray": range(K)},
    )
    out, _ = inpaint(model, InpaintProblem(known, mask, cond, cfg), rng, trace)
    frames = np.stack([decode_image(v) for v in out.image])
    for k, (frame, _) in known_views.items():
        frames[k] = np.asarray(frame, dtype=float)
    rel = np.stack([decode_depth(v) for v in out.depth])
    return frames, rel, out


def edit_object_task(latents: JointLatent, object_masks, new_cond, model, cfg: SamplerConfig,
                     rng=None, t_inv=190 / 200, trace=None):
    """Regenerate the masked object region of every view under ``new_cond``.

    ``object_masks`` is K x H x W at frame resolution; each is reduced to the
    latent grid by majority vote.  Everything outside the mask is kept exactly.
    """
    object_masks = np.asarray(object_masks)
    grid = np.stack([downsample_mask(m) for m in object_masks])
    if not grid.any():
        raise ValueError("object mask is empty at latent resolution")
    n = latents.n
    mask = np.ones_like(latents.data)
    mask[:, : 2 * n] = np.where(grid[:, None], 0.0, 1.0)
    return resample_from(model, latents.data, new_cond, cfg, t_inv, rng, n,
                         known=True, mask=mask, trace=trace)


def edit_stroke_task(stroked_frames, cond, model, cfg: SamplerConfig, rng=None, t_inv=100 / 200,
                     depths=None, poses=None, trace=None):
    """Invert stroked frames to ``t_inv`` and sample them back under ``cond``.

    Depth and ray groups use the given depths and poses when provided; missing
    groups start from a zero latent, so at ``t_inv`` they are pure scaled noise.
    """
    stroked_frames = np.asarray(stroked_frames, dtype=float)
    img = np.stack([encode_image(f) for f in stroked_frames])
    K, n, h, w = img.shape
    dep = np.stack([encode_depth(d) for d in depths]) if depths is not None else np.zeros_like(img)
    if poses is not None:
        rays = [pose_to_rays(p, h, w) for p in poses]
    else:
        rays = [np.zeros((6, h, w))] * K
    y0 = assemble(img, dep, rays)
    return resample_from(model, y0.data, cond, cfg, t_inv, rng, n, trace=trace)
