"""Software 3D Gaussian splatting: EWA projection and front-to-back compositing.

A Gaussian contributes ``alpha * exp(-q / 2)`` at a pixel whose Mahalanobis
distance ``q`` to the projected mean is at most 9 (three sigma); beyond that it
contributes nothing.  Gaussians are depth-sorted once per view and composited
front to back over a black background.  Gaussians closer than ``NEAR`` or whose
centers project outside ``FRUSTUM`` times the normalized image extent are culled.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .cloud import GaussianCloud, quaternion_to_rotation

NEAR = 0.2
CUTOFF = 9.0
FRUSTUM = 1.3  # centers beyond 1.3x the image half-extent are culled


class Projection:
    """Screen-space quantities of a cloud seen from one camera (pixel units)."""

    def __init__(self, cloud: GaussianCloud, pose, width: int, height: int):
        fx, fy, cx, cy = pose.intrinsics.to_pixels(width, height)
        sk = pose.intrinsics.skew * width / 2
        xc = cloud.mu @ pose.R.T + pose.T
        z = xc[:, 2]
        self.visible = z > NEAR
        zs = np.where(self.visible, z, 1.0)
        xn = (pose.intrinsics.fx * xc[:, 0] + pose.intrinsics.skew * xc[:, 1]) / zs + pose.intrinsics.cx
        yn = pose.intrinsics.fy * xc[:, 1] / zs + pose.intrinsics.cy
        self.visible &= (np.abs(xn) <= FRUSTUM) & (np.abs(yn) <= FRUSTUM)
        J = np.zeros((len(cloud), 2, 3))
        J[:, 0, 0] = fx / zs
        J[:, 0, 1] = sk / zs
        J[:, 0, 2] = -(fx * xc[:, 0] + sk * xc[:, 1]) / zs**2
        J[:, 1, 1] = fy / zs
        J[:, 1, 2] = -fy * xc[:, 1] / zs**2
        self.M = J @ pose.R
        cov3 = cloud.covariances()
        cov2 = self.M @ cov3 @ self.M.transpose(0, 2, 1)
        det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
        self.visible &= det > 1e-18
        det = np.where(self.visible, det, 1.0)
        self.conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=1)
        self.mean = np.stack(
            [(fx * xc[:, 0] + sk * xc[:, 1]) / zs + cx, fy * xc[:, 1] / zs + cy], axis=1
        )
        tr = cov2[:, 0, 0] + cov2[:, 1, 1]
        lam = tr / 2 + np.sqrt(np.maximum(tr**2 / 4 - det, 0.0))
        self.radius = np.sqrt(CUTOFF * lam)
        self.depth = z
        self.xc, self.zs = xc, zs
        self.focal = (fx, fy, sk)
        self.R = pose.R
        vis = np.flatnonzero(self.visible)
        self.order = vis[np.argsort(z[vis], kind="stable")]
        self.width, self.height = width, height


@njit(cache=True)
def _composite(order, mean, conic, radius, alpha, color, W, H):
    C = np.zeros((H, W, 3))
    T = np.ones((H, W))
    for gi in order:
        mx, my = mean[gi, 0], mean[gi, 1]
        r = radius[gi]
        x0 = max(int(np.ceil(mx - r)), 0)
        x1 = min(int(np.floor(mx + r)), W - 1)
        y0 = max(int(np.ceil(my - r)), 0)
        y1 = min(int(np.floor(my + r)), H - 1)
        a, b, c = conic[gi, 0], conic[gi, 1], conic[gi, 2]
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                dx = px - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > 9.0:
                    continue
                w = alpha[gi] * np.exp(-0.5 * q)
                t = T[py, px]
                for ch in range(3):
                    C[py, px, ch] += t * w * color[gi, ch]
                T[py, px] = t * (1.0 - w)
    return C, T


@njit(cache=True)
def _composite_backward(order, mean, conic, radius, alpha, color, T_final, dC, W, H):
    G = mean.shape[0]
    g_color = np.zeros((G, 3))
    g_alpha = np.zeros(G)
    g_mean = np.zeros((G, 2))
    g_conic = np.zeros((G, 3))
    T = T_final.copy()
    S = np.zeros((H, W, 3))
    for oi in range(len(order) - 1, -1, -1):
        gi = order[oi]
        mx, my = mean[gi, 0], mean[gi, 1]
        r = radius[gi]
        x0 = max(int(np.ceil(mx - r)), 0)
        x1 = min(int(np.floor(mx + r)), W - 1)
        y0 = max(int(np.ceil(my - r)), 0)
        y1 = min(int(np.floor(my + r)), H - 1)
        a, b, c = conic[gi, 0], conic[gi, 1], conic[gi, 2]
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                dx = px - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > 9.0:
                    continue
                g = np.exp(-0.5 * q)
                w = alpha[gi] * g
                t = T[py, px] / (1.0 - w)
                dw = 0.0
                for ch in range(3):
                    g_color[gi, ch] += dC[py, px, ch] * w * t
                    dw += dC[py, px, ch] * (color[gi, ch] * t - S[py, px, ch] / (1.0 - w))
                    S[py, px, ch] += color[gi, ch] * w * t
                T[py, px] = t
                g_alpha[gi] += dw * g
                dq = -0.5 * w * dw
                g_mean[gi, 0] += dq * (-2.0) * (a * dx + b * dy)
                g_mean[gi, 1] += dq * (-2.0) * (b * dx + c * dy)
                g_conic[gi, 0] += dq * dx * dx
                g_conic[gi, 1] += dq * 2.0 * dx * dy
                g_conic[gi, 2] += dq * dy * dy
    return g_color, g_alpha, g_mean, g_conic


def render(cloud: GaussianCloud, pose, width: int, height: int, return_projection=False):
    """Returns (H x W x 3 image, H x W alpha map)."""
    if len(cloud) == 0:
        img, alpha = np.zeros((height, width, 3)), np.zeros((height, width))
        return (img, alpha, None) if return_projection else (img, alpha)
    proj = Projection(cloud, pose, width, height)
    C, T = _composite(
        proj.order.astype(np.int64),
        proj.mean,
        proj.conic,
        proj.radius,
        np.ascontiguousarray(cloud.alpha, dtype=float),
        np.ascontiguousarray(cloud.color, dtype=float),
        width,
        height,
    )
    if return_projection:
        return C, 1.0 - T, (proj, T)
    return C, 1.0 - T


def render_backward(cloud: GaussianCloud, projection, dC):
    """Gradients of a scalar loss w.r.t. color, opacity, screen mean and conic.

    ``projection`` is the third value returned by ``render(..., return_projection=True)``.
    """
    proj, T_final = projection
    return _composite_backward(
        proj.order.astype(np.int64),
        proj.mean,
        proj.conic,
        proj.radius,
        np.ascontiguousarray(cloud.alpha, dtype=float),
        np.ascontiguousarray(cloud.color, dtype=float),
        T_final,
        np.ascontiguousarray(dC, dtype=float),
        proj.width,
        proj.height,
    )


def isotropic_conic_backward(projection, scale, g_conic):
    """Chain conic gradients of isotropic Gaussians to world positions and scales.

    With ``Sigma = s^2 I`` the screen covariance is ``s^2 J J^T``, which depends on
    the camera-space position through the projection Jacobian ``J``.
    """
    proj = projection[0] if isinstance(projection, tuple) else projection
    fx, fy, sk = proj.focal
    x, y = proj.xc[:, 0], proj.xc[:, 1]
    z = proj.zs
    G = len(z)
    J = np.zeros((G, 2, 3))
    J[:, 0, 0], J[:, 0, 1], J[:, 0, 2] = fx / z, sk / z, -(fx * x + sk * y) / z**2
    J[:, 1, 1], J[:, 1, 2] = fy / z, -fy * y / z**2
    a, b, c = proj.conic.T
    C = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    Gm = np.stack(
        [np.stack([g_conic[:, 0], g_conic[:, 1] / 2], -1), np.stack([g_conic[:, 1] / 2, g_conic[:, 2]], -1)],
        -2,
    )
    g_cov = -C @ Gm @ C
    s = np.asarray(scale, dtype=float).reshape(G)
    g_J = 2 * s[:, None, None] ** 2 * g_cov @ J
    g_s = 2 * s * np.einsum("gij,gij->g", g_cov, J @ J.transpose(0, 2, 1))
    gx = -fx / z**2 * g_J[:, 0, 2]
    gy = -sk / z**2 * g_J[:, 0, 2] - fy / z**2 * g_J[:, 1, 2]
    gz = (
        -fx / z**2 * g_J[:, 0, 0]
        - sk / z**2 * g_J[:, 0, 1]
        + 2 * (fx * x + sk * y) / z**3 * g_J[:, 0, 2]
        - fy / z**2 * g_J[:, 1, 1]
        + 2 * fy * y / z**3 * g_J[:, 1, 2]
    )
    g_xc = np.stack([gx, gy, gz], 1)
    g_xc[~proj.visible] = 0
    g_s[~proj.visible] = 0
    return g_xc @ proj.R, g_s


def render_depth(cloud: GaussianCloud, pose, width: int, height: int, far: float):
    """Alpha-composited camera-space depth with the background at ``far``."""
    if len(cloud) == 0:
        return np.full((height, width), float(far))
    proj = Projection(cloud, pose, width, height)
    zcol = np.repeat(proj.depth[:, None], 3, axis=1)
    C, T = _composite(
        proj.order.astype(np.int64), proj.mean, proj.conic, proj.radius,
        np.ascontiguousarray(cloud.alpha, dtype=float), zcol, width, height,
    )
    return C[..., 0] + T * far


def render_oracle(cloud: GaussianCloud, pose, width: int, height: int):
    """Brute-force reference: every Gaussian evaluated at every pixel, sorted per pixel."""
    K = pose.intrinsics
    fx, fy = K.fx * width / 2, K.fy * height / 2
    sk = K.skew * width / 2
    cx, cy = (K.cx + 1) * width / 2 - 0.5, (K.cy + 1) * height / 2 - 0.5
    splats = []
    for i in range(len(cloud)):
        g = cloud[i]
        X, Y, Z = pose.R @ g.mu + pose.T
        if Z <= NEAR:
            continue
        if abs((K.fx * X + K.skew * Y) / Z + K.cx) > FRUSTUM or abs(K.fy * Y / Z + K.cy) > FRUSTUM:
            continue
        Rq = quaternion_to_rotation(g.rot)
        cov3 = Rq @ np.diag(np.asarray(g.scale) ** 2) @ Rq.T
        J = np.array(
            [[fx / Z, sk / Z, -(fx * X + sk * Y) / Z**2], [0.0, fy / Z, -fy * Y / Z**2]]
        )
        cov2 = J @ pose.R @ cov3 @ pose.R.T @ J.T
        if np.linalg.det(cov2) <= 1e-18:
            continue
        splats.append(
            (Z, i, np.array([(fx * X + sk * Y) / Z + cx, fy * Y / Z + cy]), np.linalg.inv(cov2), g)
        )
    splats.sort(key=lambda s: (s[0], s[1]))
    image = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            T = 1.0
            out = np.zeros(3)
            for _, _, mean, inv, g in splats:
                d = np.array([px, py]) - mean
                q = d @ inv @ d
                if q > CUTOFF:
                    continue
                w = g.alpha * np.exp(-0.5 * q)
                out += T * w * np.asarray(g.color)
                T *= 1 - w
            image[py, px] = out
            alpha[py, px] = 1 - T
    return image, alpha
