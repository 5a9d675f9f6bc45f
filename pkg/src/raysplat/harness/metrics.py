"""Pose, image and depth metrics for the toy benchmark."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

from ..rays import CameraIntrinsics, look_at, random_rotation, rotation_angle

ROTATION_THRESHOLDS = (5.0, 10.0, 15.0)
CENTER_THRESHOLDS = (0.05, 0.1, 0.2)
PSNR_CAP = 99.0


def relative_rotation_errors(pred, gt) -> np.ndarray:
    """Geodesic errors (degrees) of ``R_k R_1^T`` for views k >= 2."""
    if len(pred) != len(gt):
        raise ValueError(f"pose count mismatch: {len(pred)} vs {len(gt)}")
    rp = [p.R @ pred[0].R.T for p in pred[1:]]
    rg = [g.R @ gt[0].R.T for g in gt[1:]]
    return np.array([np.degrees(rotation_angle(a @ b.T)) for a, b in zip(rp, rg)])


def umeyama(src, dst, with_scale=True):
    """Similarity (s, R, t) minimizing ``sum |s R src + t - dst|^2``."""
    src, dst = np.asarray(src, dtype=float), np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var = (xs**2).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def center_errors(pred, gt) -> np.ndarray:
    """Distances between similarity-aligned predicted centers and GT centers."""
    if len(pred) != len(gt):
        raise ValueError(f"pose count mismatch: {len(pred)} vs {len(gt)}")
    cp = np.stack([p.center for p in pred])
    cg = np.stack([g.center for g in gt])
    s, R, t = umeyama(cp, cg)
    return np.linalg.norm(s * cp @ R.T + t - cg, axis=1)


def eval_pose_accuracy(pred, gt, scene_scale: float) -> dict:
    if scene_scale <= 0:
        raise ValueError("scene scale must be positive")
    rot = relative_rotation_errors(pred, gt)
    cen = center_errors(pred, gt) / scene_scale
    out = {f"rot@{q:g}": float(np.mean(rot < q)) for q in ROTATION_THRESHOLDS}
    out.update({f"center@{q:g}": float(np.mean(cen < q)) for q in CENTER_THRESHOLDS})
    return out


def random_orbit_poses(rng, views, radius=3.0, intrinsics=None):
    """Cameras at random directions on a sphere, looking at the origin."""
    intrinsics = intrinsics or CameraIntrinsics.from_fov(60.0)
    poses = []
    for _ in range(views):
        c = rng.normal(size=3)
        c = radius * c / np.linalg.norm(c)
        up = random_rotation(rng)[:, 2]
        if abs(np.dot(up, c)) > 0.99 * radius:
            up = np.cross(c, [1.0, 0.0, 0.0])
        poses.append(look_at(c, np.zeros(3), intrinsics, up=up))
    return poses


def random_pose_baseline(scenes, rng, trials=20) -> dict:
    """Monte-Carlo accuracy of random orbit guesses against each scene's GT cameras."""
    acc = []
    for scene in scenes:
        for _ in range(trials):
            guess = random_orbit_poses(rng, len(scene.poses))
            acc.append(eval_pose_accuracy(guess, scene.poses, scene.scale))
    return {k: float(np.mean([a[k] for a in acc])) for k in acc[0]}


def psnr(pred, gt) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=float) - np.asarray(gt, dtype=float)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def ssim(pred, gt, window=7, data_range=1.0) -> float:
    """Mean SSIM with a uniform window, channels averaged; H x W (x C) inputs."""
    x = np.asarray(pred, dtype=float)
    y = np.asarray(gt, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        f = lambda z: uniform_filter(z, window, mode="reflect")  # noqa: E731
        ma, mb = f(a), f(b)
        va = f(a * a) - ma * ma
        vb = f(b * b) - mb * mb
        cov = f(a * b) - ma * mb
        s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def median_align(pred, gt) -> np.ndarray:
    return np.asarray(pred, dtype=float) * (np.median(gt) / np.median(pred))


def depth_metrics(pred, gt, align=True) -> dict:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if np.any(gt <= 0):
        raise ValueError("ground-truth depth must be positive")
    if np.any(pred <= 0):
        raise ValueError("predicted depth must be positive")
    if align:
        pred = median_align(pred, gt)
    absrel = float(np.mean(np.abs(pred - gt) / gt))
    delta1 = float(np.mean(np.maximum(pred / gt, gt / pred) < 1.25))
    return {"absrel": absrel, "delta1": delta1}


def eval_nvs(renders, gt_images, pred_depths=None, gt_depths=None) -> dict:
    """Per-view PSNR/SSIM (and depth metrics with per-view median alignment), averaged."""
    renders, gt_images = np.asarray(renders, dtype=float), np.asarray(gt_images, dtype=float)
    if renders.shape != gt_images.shape:
        raise ValueError(f"shape mismatch: {renders.shape} vs {gt_images.shape}")
    out = {
        "psnr": float(np.mean([psnr(r, g) for r, g in zip(renders, gt_images)])),
        "ssim": float(np.mean([ssim(r, g) for r, g in zip(renders, gt_images)])),
    }
    if pred_depths is not None and gt_depths is not None:
        dm = [depth_metrics(p, g) for p, g in zip(pred_depths, gt_depths)]
        out["absrel"] = float(np.mean([d["absrel"] for d in dm]))
        out["delta1"] = float(np.mean([d["delta1"] for d in dm]))
    return out


def relative_to_metric_depth(rel, lo=1.0, hi=None):
    """Maps a [-1, 1] relative depth to a positive range for metric evaluation."""
    rel = np.asarray(rel, dtype=float)
    hi = hi if hi is not None else lo + 2.0
    return lo + (np.clip(rel, -1, 1) + 1) / 2 * (hi - lo)

