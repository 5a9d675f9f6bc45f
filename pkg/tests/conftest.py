import numpy as np
import pytest

from raysplat.harness.metrics import random_orbit_poses
from raysplat.rays import CameraIntrinsics, CameraPose, random_rotation


def random_intrinsics(rng):
    f = rng.uniform(1.2, 2.2)
    return CameraIntrinsics(f, f * rng.uniform(0.95, 1.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05))


def random_pose_set(rng, views=8):
    """Orbit cameras with one shared random intrinsic matrix."""
    return random_orbit_poses(rng, views, radius=rng.uniform(2.0, 5.0), intrinsics=random_intrinsics(rng))


def random_pose(rng, intrinsics=None):
    K = intrinsics or random_intrinsics(rng)
    return CameraPose(K, random_rotation(rng), rng.normal(size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class PointMassField:
    """Exact velocity ``(y - y0) / t`` of the straight path toward a single point."""

    null_trained = True

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def __call__(self, y, t, cond=None):
        return (np.asarray(y) - self.target) / t


class ConstantField:
    """Velocity independent of the state; conditional and null outputs differ by ``delta``."""

    null_trained = True

    def __init__(self, base, delta):
        self.base, self.delta = np.asarray(base, float), np.asarray(delta, float)

    def __call__(self, y, t, cond=None):
        return self.base + (0 if cond is None else self.delta)


class WobblyPointMass(PointMassField):
    """Point-mass field plus a smooth state-dependent error, so destinations are inexact."""

    def __init__(self, target, amp=0.05):
        super().__init__(target)
        self.amp = amp

    def __call__(self, y, t, cond=None):
        return super().__call__(y, t, cond) + self.amp * np.sin(3 * np.asarray(y))


def scene_latent(rng, views=4, h=4, w=4):
    """Joint latent with random image/depth groups and exact rays of an orbit rig."""
    from raysplat.latent import JointLatent
    from raysplat.rays import poses_to_channels

    poses = random_pose_set(rng, views)
    data = np.concatenate(
        [rng.uniform(-1, 1, size=(views, 6, h, w)), poses_to_channels(poses, h, w)], axis=1
    )
    return JointLatent(data), poses


def random_cloud(rng, count):
    """Anisotropic Gaussians near the origin, in view of a camera at distance about 3."""
    from raysplat.gsplat.cloud import GaussianCloud

    return GaussianCloud(
        rng.normal(0, 0.6, size=(count, 3)),
        rng.uniform(0.05, 0.95, count),
        rng.uniform(0.05, 0.4, size=(count, 3)),
        rng.normal(size=(count, 4)),
        rng.random((count, 3)),
    )


def random_camera(rng):
    from raysplat.harness.metrics import random_orbit_poses

    return random_orbit_poses(rng, 1, radius=rng.uniform(2.5, 4.0), intrinsics=random_intrinsics(rng))[0]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    outcome = {}
    for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", []):
        if "test_acceptance.py::test_c" in rep.nodeid and rep.when == "call":
            outcome[int(rep.nodeid.split("test_c")[1][:2])] = rep.outcome.upper()
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        terminalreporter.write_line(f"{k:2d} {outcome.get(k, '?'):6s} {RESULTS[k]}")
