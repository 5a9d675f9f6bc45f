"""Plücker ray cameras and pose recovery from dense ray bundles.

Image coordinates are normalized: pixel ``(u, v)`` of an ``h x w`` grid sits at
``x = 2 (u + 0.5) / w - 1``, ``y = 2 (v + 0.5) / h - 1``, so the image spans
``[-1, 1]`` on both axes regardless of resolution.  Intrinsics are expressed in
the same units (a 60 degree field of view is ``fx = 1 / tan(30 deg)``).  Cameras
follow the OpenCV convention: x right, y down, z forward, ``x_cam = R x_world + T``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class RayRecoveryError(ValueError):
    """Raised when a ray bundle does not determine a camera."""

    def __init__(self, message, view=None):
        if view is not None:
            message = f"view {view}: {message}"
        super().__init__(message)
        self.view = view


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float = 0.0
    cy: float = 0.0
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float)
        K = K / K[2, 2]
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), float(K[0, 1]))

    @classmethod
    def from_fov(cls, fov_deg: float) -> "CameraIntrinsics":
        f = 1.0 / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f)

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy) in pixel units where pixel centers sit on integers."""
        return (
            self.fx * width / 2,
            self.fy * height / 2,
            (self.cx + 1) * width / 2 - 0.5,
            (self.cy + 1) * height / 2 - 0.5,
        )


@dataclass(frozen=True)
class CameraPose:
    intrinsics: CameraIntrinsics
    R: np.ndarray
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        T = np.asarray(self.T, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("R must be a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    def world_to_camera(self, points):
        return np.asarray(points) @ self.R.T + self.T

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            self.intrinsics == other.intrinsics
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.T, other.T)
        )

    __hash__ = None


@dataclass(frozen=True)
class PluckerRayGrid:
    """Per-pixel unit directions ``d`` and moments ``m = c x d``, both ``(h, w, 3)``."""

    d: np.ndarray
    m: np.ndarray

    @property
    def shape(self):
        return self.d.shape[:2]

    def to_channels(self) -> np.ndarray:
        """6 x h x w layout: direction then moment."""
        return np.concatenate([self.d, self.m], axis=-1).transpose(2, 0, 1)

    @classmethod
    def from_channels(cls, channels) -> "PluckerRayGrid":
        channels = np.asarray(channels, dtype=float)
        if channels.ndim != 3 or channels.shape[0] != 6:
            raise ValueError(f"expected 6 x h x w ray channels, got {channels.shape}")
        hwc = channels.transpose(1, 2, 0)
        return cls(hwc[..., :3], hwc[..., 3:])


def pixel_grid(h: int, w: int) -> np.ndarray:
    """Homogeneous normalized pixel-center coordinates, shape (h, w, 3)."""
    xs = 2 * (np.arange(w) + 0.5) / w - 1
    ys = 2 * (np.arange(h) + 0.5) / h - 1
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X, Y, np.ones_like(X)], axis=-1)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _skew(v):
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])


def _inverse_K(intrinsics: CameraIntrinsics) -> np.ndarray:
    K = intrinsics.matrix
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("singular intrinsic matrix")
    return np.linalg.inv(K)


def identity_ray_directions(intrinsics: CameraIntrinsics, h: int, w: int) -> np.ndarray:
    """Unit ray directions of a camera with these intrinsics and identity rotation."""
    Kinv = _inverse_K(intrinsics)
    return _normalize(pixel_grid(h, w) @ Kinv.T)


def pose_to_rays(pose: CameraPose, h: int, w: int) -> PluckerRayGrid:
    if h < 2 or w < 2:
        raise ValueError("ray grids need at least 2 x 2 pixels")
    Kinv = _inverse_K(pose.intrinsics)
    d = _normalize(pixel_grid(h, w) @ (pose.R.T @ Kinv).T)
    m = np.cross(pose.center, d)
    return PluckerRayGrid(d, m)


def estimate_center(rays: PluckerRayGrid) -> np.ndarray:
    """Least-squares point closest to all rays: argmin_p sum |p x d - m|^2."""
    d = rays.d.reshape(-1, 3)
    m = rays.m.reshape(-1, 3)
    sq = np.einsum("ij,ij->i", d, d)
    A = np.eye(3) * sq.sum() - d.T @ d
    b = np.cross(d, m).sum(axis=0)
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 1e-9 * max(s[0], 1e-300):
        raise RayRecoveryError("rays are parallel; camera center is undetermined")
    return np.linalg.solve(A, b)


def estimate_projection(rays: PluckerRayGrid) -> np.ndarray:
    """Unit-norm H minimizing sum |H d_i x u_i| with u the identity-camera directions."""
    h, w = rays.shape
    d = rays.d.reshape(-1, 3)
    u = identity_ray_directions(CameraIntrinsics(1.0, 1.0), h, w).reshape(-1, 3)
    if len(d) < 4:
        raise RayRecoveryError("need at least 4 rays to estimate a projection")
    # u x (H d) is linear in vec(H): rows of [u]_x kron(I, d^T)
    ux = np.zeros((len(u), 3, 3))
    ux[:, 0, 1], ux[:, 0, 2] = -u[:, 2], u[:, 1]
    ux[:, 1, 0], ux[:, 1, 2] = u[:, 2], -u[:, 0]
    ux[:, 2, 0], ux[:, 2, 1] = -u[:, 1], u[:, 0]
    A = np.einsum("nrk,nc->nrkc", ux, d).reshape(-1, 9)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] <= 1e-10 * s[0]:
        raise RayRecoveryError("degenerate ray bundle; projection is not unique")
    H = vt[-1].reshape(3, 3)
    if np.linalg.det(H) < 0:
        H = -H
    return H


def rq_givens(M):
    """RQ decomposition M = U Q (U upper triangular, Q orthogonal) by Givens rotations."""
    U = np.array(M, dtype=float)
    Q = np.eye(3)

    def rotate(U, Q, G):
        return U @ G, G.T @ Q

    r = np.hypot(U[2, 1], U[2, 2])
    if r > 0:
        c, s = -U[2, 2] / r, U[2, 1] / r
        U, Q = rotate(U, Q, np.array([[1, 0, 0], [0, c, -s], [0, s, c]]))
    r = np.hypot(U[2, 0], U[2, 2])
    if r > 0:
        c, s = U[2, 2] / r, U[2, 0] / r
        U, Q = rotate(U, Q, np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]))
    r = np.hypot(U[1, 0], U[1, 1])
    if r > 0:
        c, s = -U[1, 1] / r, U[1, 0] / r
        U, Q = rotate(U, Q, np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]))
    U[2, 0] = U[2, 1] = U[1, 0] = 0.0
    return U, Q


def decompose_dlt(H) -> tuple[CameraIntrinsics, np.ndarray]:
    """Split a homogeneous 3x3 projection into intrinsics and a proper rotation.

    H is only defined up to scale and sign, so the returned pair satisfies
    ``K @ R = lambda * H`` for some nonzero ``lambda``; K has a positive diagonal
    with ``K[2, 2] = 1`` and ``det(R) = +1``.
    """
    H = np.asarray(H, dtype=float)
    det = np.linalg.det(H)
    if not np.isfinite(det) or abs(det) < 1e-12 * max(np.abs(H).max(), 1e-300) ** 3:
        raise RayRecoveryError("singular projection matrix")
    if det < 0:
        H = -H
    U, Q = rq_givens(H)
    D = np.diag(np.sign(np.diag(U)))
    U, Q = U @ D, D @ Q
    if np.linalg.det(Q) < 0:
        # only reachable through round-off when det(H) is tiny
        Q = -Q
        U = -U
    U = U / U[2, 2]
    return CameraIntrinsics.from_matrix(U), Q


def _rodrigues(v):
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return np.eye(3) + _skew(v)
    k = _skew(v / theta)
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * k @ k


def _rodrigues_batch(vs):
    theta = np.linalg.norm(vs, axis=-1)
    safe = np.where(theta < 1e-12, 1.0, theta)
    k = vs / safe[:, None]
    K = np.zeros((len(vs), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.where(theta < 1e-12, theta, np.sin(theta))[:, None, None]
    c = np.where(theta < 1e-12, 0.0, 1 - np.cos(theta))[:, None, None]
    return np.eye(3) + s * K + c * K @ K


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass
class SharedRefinement:
    intrinsics: CameraIntrinsics
    rotations: list
    trace: list


def _shared_objective(theta, rotations, dirs, grid, with_grad=False):
    """sum_j sum_i |R_j d_ji x normalize(K^-1 w_i)| and its gradient.

    theta = (log fx, log fy, cx, cy); the rotation gradient is w.r.t. a left
    axis-angle increment evaluated at zero.
    """
    fx, fy = np.exp(theta[:2])
    cx, cy = theta[2:]
    v = np.stack([(grid[:, 0] - cx) / fx, (grid[:, 1] - cy) / fy, np.ones(len(grid))], axis=-1)
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    b = v / vn
    a = np.einsum("jrc,jnc->jnr", rotations, dirs)
    e = np.cross(a, b[None])
    norms = np.linalg.norm(e, axis=-1)
    f = norms.sum()
    if not with_grad:
        return f
    g = np.divide(e, norms[..., None], out=np.zeros_like(e), where=norms[..., None] > 1e-300)
    df_da = np.cross(b[None], g)
    df_db = np.cross(g, a).sum(axis=0)
    df_dv = (df_db - b * np.einsum("nk,nk->n", b, df_db)[:, None]) / vn
    grad_theta = np.array(
        [
            -(df_dv[:, 0] * v[:, 0]).sum(),
            -(df_dv[:, 1] * v[:, 1]).sum(),
            -(df_dv[:, 0]).sum() / fx,
            -(df_dv[:, 1]).sum() / fy,
        ]
    )
    grad_rot = np.cross(a, df_da).sum(axis=1)
    return f, grad_theta, grad_rot


def refine_shared_intrinsics(
    rays, init, iterations=10, lr=1e-2, max_halvings=24
) -> SharedRefinement:
    """Jointly fit one intrinsic matrix and per-view rotations to the ray directions.

    Adam steps on (log fx, log fy, cx, cy) and per-view axis-angle increments.
    A step that would raise the objective is halved until it does not, so the
    recorded trace is non-increasing.
    """
    if len(rays) < 2:
        raise ValueError("shared intrinsic refinement needs at least two views")
    if len(init) != len(rays):
        raise ValueError("one initial (K, R) estimate per view is required")
    h, w = rays[0].shape
    grid = pixel_grid(h, w).reshape(-1, 3)
    dirs = np.stack([r.d.reshape(-1, 3) for r in rays])
    Ks = [k for k, _ in init]
    theta = np.array(
        [
            np.mean([np.log(k.fx) for k in Ks]),
            np.mean([np.log(k.fy) for k in Ks]),
            np.mean([k.cx for k in Ks]),
            np.mean([k.cy for k in Ks]),
        ]
    )
    rotations = np.stack([np.asarray(R, dtype=float) for _, R in init])
    n = 4 + 3 * len(rays)
    m1, m2 = np.zeros(n), np.zeros(n)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    f = _shared_objective(theta, rotations, dirs, grid)
    if not np.isfinite(f):
        raise RayRecoveryError("non-finite refinement objective")
    trace = [float(f)]
    stalled = False
    for it in range(1, iterations + 1):
        if stalled:
            # no descent step exists at this point; later Adam steps would only re-probe it
            trace.append(float(f))
            continue
        _, g_theta, g_rot = _shared_objective(theta, rotations, dirs, grid, with_grad=True)
        grad = np.concatenate([g_theta, g_rot.ravel()])
        m1 = beta1 * m1 + (1 - beta1) * grad
        m2 = beta2 * m2 + (1 - beta2) * grad**2
        step = lr * (m1 / (1 - beta1**it)) / (np.sqrt(m2 / (1 - beta2**it)) + eps)
        for _ in range(max_halvings):
            cand_theta = theta - step[:4]
            incr = -step[4:].reshape(-1, 3)
            cand_rot = _rodrigues_batch(incr) @ rotations
            f_new = _shared_objective(cand_theta, cand_rot, dirs, grid)
            if not np.isfinite(f_new):
                raise RayRecoveryError("non-finite refinement objective")
            if f_new < f:
                theta, f = cand_theta, f_new
                rotations = np.stack([_orthonormalize(R) for R in cand_rot])
                break
            step = step / 2
        else:
            stalled = True
        trace.append(float(f))
    fx, fy = np.exp(theta[:2])
    K = CameraIntrinsics(float(fx), float(fy), float(theta[2]), float(theta[3]))
    return SharedRefinement(K, list(rotations), trace)


def rays_to_pose(rays_per_view, return_trace=False):
    """Recover a shared-intrinsics camera for every ray grid."""
    rays_per_view = list(rays_per_view)
    centers, inits = [], []
    for j, rays in enumerate(rays_per_view):
        try:
            centers.append(estimate_center(rays))
            inits.append(decompose_dlt(estimate_projection(rays)))
        except RayRecoveryError as exc:
            raise RayRecoveryError(str(exc), view=j) from None
    if len(rays_per_view) == 1:
        K, R = inits[0]
        poses = [CameraPose(K, R, -R @ centers[0])]
        return (poses, [0.0]) if return_trace else poses
    ref = refine_shared_intrinsics(rays_per_view, inits)
    poses = [CameraPose(ref.intrinsics, R, -R @ c) for R, c in zip(ref.rotations, centers)]
    return (poses, ref.trace) if return_trace else poses


def project_to_ray_manifold(ray_channels, return_trace=False):
    """Snap K x 6 x h x w ray channels onto exact Plücker grids of recovered cameras."""
    ray_channels = np.asarray(ray_channels, dtype=float)
    if ray_channels.ndim != 4 or ray_channels.shape[1] != 6:
        raise ValueError(f"expected K x 6 x h x w ray channels, got {ray_channels.shape}")
    h, w = ray_channels.shape[2:]
    grids = [PluckerRayGrid.from_channels(c) for c in ray_channels]
    poses, trace = rays_to_pose(grids, return_trace=True)
    out = np.stack([pose_to_rays(p, h, w).to_channels() for p in poses])
    return (out, poses, trace) if return_trace else (out, poses)


def poses_to_channels(poses, h, w) -> np.ndarray:
    return np.stack([pose_to_rays(p, h, w).to_channels() for p in poses])


def look_at(center, target, intrinsics, up=(0.0, 0.0, 1.0)) -> CameraPose:
    center = np.asarray(center, dtype=float)
    f = _normalize(np.asarray(target, dtype=float) - center)
    x = np.cross(f, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(f, (1.0, 0.0, 0.0))
    x = _normalize(x)
    y = np.cross(f, x)
    R = _orthonormalize(np.stack([x, y, f]))
    return CameraPose(intrinsics, R, -R @ center)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(R) - 1) / 2
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return _rodrigues(axis / np.linalg.norm(axis) * angle)


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quaternion_to_matrix(q)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# -- pose files ---------------------------------------------------------------


def poses_to_json(poses) -> str:
    records = []
    for p in poses:
        k = p.intrinsics
        records.append(
            {
                "fx": k.fx,
                "fy": k.fy,
                "cx": k.cx,
                "cy": k.cy,
                "R": [float(x) for x in p.R.ravel()],
                "T": [float(x) for x in p.T],
            }
        )
    return json.dumps(records, indent=1)


def poses_from_json(text: str):
    poses = []
    for rec in json.loads(text):
        K = CameraIntrinsics(rec["fx"], rec["fy"], rec["cx"], rec["cy"])
        poses.append(CameraPose(K, np.array(rec["R"]).reshape(3, 3), np.array(rec["T"])))
    return poses


def save_poses(path, poses):
    with open(path, "w") as fh:
        fh.write(poses_to_json(poses))


def load_poses(path):
    with open(path) as fh:
        return poses_from_json(fh.read())
