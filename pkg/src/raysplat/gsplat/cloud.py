"""Gaussian primitives and the binary PLY container for clouds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def quaternion_to_rotation(q) -> np.ndarray:
    """(w, x, y, z) unit quaternions, shape (..., 4) -> rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    alpha: float
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        R = quaternion_to_rotation(self.rot)
        return R @ np.diag(np.asarray(self.scale) ** 2) @ R.T


class GaussianCloud:
    """Structure-of-arrays container; ``cloud[i]`` yields a single ``Gaussian``."""

    def __init__(self, mu, alpha, scale, rot=None, color=None):
        self.mu = np.asarray(mu, dtype=float).reshape(-1, 3)
        G = len(self.mu)
        self.alpha = np.asarray(alpha, dtype=float).reshape(G)
        scale = np.asarray(scale, dtype=float)
        self.scale = np.broadcast_to(scale.reshape(G, -1) if G else scale.reshape(0, 3), (G, 3)).copy()
        if rot is None:
            rot = np.tile([1.0, 0.0, 0.0, 0.0], (G, 1))
        rot = np.asarray(rot, dtype=float).reshape(G, 4)
        self.rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
        if color is None:
            color = np.ones((G, 3))
        self.color = np.asarray(color, dtype=float).reshape(G, 3)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            [g.mu for g in gaussians],
            [g.alpha for g in gaussians],
            [g.scale for g in gaussians],
            [g.rot for g in gaussians],
            [g.color for g in gaussians],
        )

    @classmethod
    def concat(cls, clouds) -> "GaussianCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.mu for c in clouds]),
            np.concatenate([c.alpha for c in clouds]),
            np.concatenate([c.scale for c in clouds]),
            np.concatenate([c.rot for c in clouds]),
            np.concatenate([c.color for c in clouds]),
        )

    def __len__(self):
        return len(self.mu)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.mu[i], float(self.alpha[i]), self.scale[i], self.rot[i], self.color[i])

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.mu[idx], self.alpha[idx], self.scale[idx], self.rot[idx], self.color[idx])

    def covariances(self) -> np.ndarray:
        R = quaternion_to_rotation(self.rot)
        return R @ (self.scale[:, :, None] ** 2 * R.transpose(0, 2, 1))

    def check(self):
        """Raises if any Gaussian violates the parameter invariants."""
        if np.any((self.alpha <= 0) | (self.alpha >= 1)):
            raise ValueError("opacity must lie in (0, 1)")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        if not np.allclose(np.linalg.norm(self.rot, axis=1), 1, atol=1e-9):
            raise ValueError("rotations must be unit quaternions")
        return self


_PLY_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
              "opacity", "red", "green", "blue"]


def save_ply(path, cloud: GaussianCloud):
    """Binary little-endian PLY with linear (not log/logit) float32 properties."""
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header.append("end_header")
    body = np.concatenate(
        [cloud.mu, cloud.scale, cloud.rot, cloud.alpha[:, None], cloud.color], axis=1
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(body.tobytes())


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        props, count = [], None
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
            elif not line and fh.tell() > 1 << 16:
                raise ValueError("missing PLY end_header")
        if props != _PLY_PROPS:
            raise ValueError(f"unexpected PLY properties {props}")
        data = np.frombuffer(fh.read(4 * len(props) * count), dtype="<f4").reshape(count, -1)
    data = data.astype(float)
    return GaussianCloud(data[:, :3], data[:, 10], data[:, 3:6], data[:, 6:10], data[:, 11:14])
