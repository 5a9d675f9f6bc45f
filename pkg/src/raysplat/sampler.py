"""Joint image/depth/ray sampling with ray-manifold projection.

The loop integrates the guided velocity from ``t = 1`` to ``t = 0`` on the grid
``t_i = i / N``.  While ``i >= t_stop`` it predicts the clean latent, recovers
cameras from its ray channels and regenerates exact Plücker rays ``r0``; after
every Euler step the ray channels are reset to ``(1 - t) r0 + t z`` with fresh
noise ``z``.  Inpainting additionally re-noises the known latents to the new
time and merges them in through the mask.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .latent import JointLatent, LatentMask, SceneCondition
from .rays import PluckerRayGrid, RayRecoveryError, project_to_ray_manifold, rays_to_pose
from .rf_core import GuidanceSpec, euler_step, guided_velocity, invert_to, predict_destination


class SamplingError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"ray recovery failed at step {step}: {cause}")
        self.step = step


@dataclass
class SamplerConfig:
    n_steps: int = 200
    t_stop: int = 150
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    swap_period: int = 3
    external_scale: float = 3.0
    seed: int = 0
    swap_enabled: bool = False
    # not part of the published loop: skip ray re-noising once poses are frozen
    renoise_after_stop: bool = True

    def __post_init__(self):
        if isinstance(self.guidance, dict):
            g = self.guidance
            extra = set(g) - {"image", "depth", "ray"}
            if extra:
                raise ValueError(f"unknown guidance keys: {sorted(extra)}")
            self.guidance = GuidanceSpec(g.get("image", 7.0), g.get("depth", 5.0), g.get("ray", 1.0))
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not 1 <= self.t_stop <= self.n_steps:
            raise ValueError("t_stop must lie in [1, n_steps]")
        if self.swap_period < 1:
            raise ValueError("swap_period must be at least 1")

    def to_dict(self):
        d = asdict(self)
        d["guidance"] = {
            "image": self.guidance.scale_image,
            "depth": self.guidance.scale_depth,
            "ray": self.guidance.scale_ray,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sampler config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    t: float
    destination: bool
    objective: float | None
    poses: list | None
    swap: bool
    swap_view: int | None
    renoise: bool
    # arrays kept for in-process checks; left out of the JSON form
    rays_dest: np.ndarray | None = field(default=None, repr=False)
    noise: np.ndarray | None = field(default=None, repr=False)

    def to_json(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("rays_dest", "noise")}
        return json.dumps(d, sort_keys=True)


def _pose_snapshot(poses):
    return [
        {"fx": p.intrinsics.fx, "fy": p.intrinsics.fy, "cx": p.intrinsics.cx, "cy": p.intrinsics.cy,
         "R": p.R.ravel().tolist(), "T": p.T.tolist()}
        for p in poses
    ]


def rng_streams(seed_or_rng):
    """Independent (trajectory, auxiliary) generators derived from one seed."""
    if isinstance(seed_or_rng, np.random.Generator):
        a, b = seed_or_rng.spawn(2)
        return a, b
    ss = np.random.SeedSequence(int(seed_or_rng))
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def _run(model, y, cond, cfg: SamplerConfig, n, start, streams, known=None, mask=None,
         external=None, trace=None):
    """Shared sampling/inpainting loop from step index ``start`` down to 1."""
    main, aux = streams
    N = cfg.n_steps
    rays = slice(2 * n, 2 * n + 6)
    r0, poses = None, None
    for i in range(start, 0, -1):
        t, t_prev = i / N, (i - 1) / N
        v = guided_velocity(model, y, t, cond, cfg.guidance, n)
        v_hat = v
        swapped, swap_view = False, None
        update = i >= cfg.t_stop or r0 is None
        objective = None
        if update:
            if (known is None and cfg.swap_enabled and i >= cfg.t_stop
                    and (N - i) % cfg.swap_period == 0 and i != cfg.t_stop):
                swap_view = int(aux.integers(y.shape[0]))
                v_ext = guided_velocity(
                    external, y[swap_view : swap_view + 1, :n], t, cond,
                    GuidanceSpec.uniform(cfg.external_scale),
                )
                v_hat = v.copy()
                v_hat[swap_view, :n] = v_ext[0]
                swapped = True
            dest = predict_destination(y, v, t)[:, rays]
            if known is not None:
                m = mask[:, rays]
                dest = np.where(m == 1, known[:, rays], dest)
            try:
                r0, poses, rtrace = project_to_ray_manifold(dest, return_trace=True)
            except (RayRecoveryError, np.linalg.LinAlgError, ValueError) as exc:
                raise SamplingError(i, exc) from exc
            objective = rtrace[-1]
        y = euler_step(y, v_hat, t, t_prev)
        z = main.standard_normal(y[:, rays].shape)
        renoise = cfg.renoise_after_stop or update
        if renoise:
            y[:, rays] = (1 - t_prev) * r0 + t_prev * z
        if known is not None:
            eps = aux.standard_normal(y.shape)
            y_known = (1 - t_prev) * known + t_prev * eps
            y = np.where(mask == 1, y_known, y)
        if trace is not None:
            trace.append(
                StepRecord(i, t, update, objective, _pose_snapshot(poses), swapped, swap_view, renoise,
                           r0, z)
            )
    return y, poses


def _poses_from_rays(y, n):
    return rays_to_pose([PluckerRayGrid.from_channels(c) for c in y[:, 2 * n : 2 * n + 6]])


def generate(model, cond: SceneCondition | None, cfg: SamplerConfig, shape, external=None,
             rng=None, n=3, trace=None):
    """Sample a joint latent of ``shape = (K, 2n + 6, h, w)`` and its cameras."""
    if cfg.swap_enabled and external is None:
        raise ValueError("guidance swap is enabled but no external model was given")
    streams = rng_streams(cfg.seed if rng is None else rng)
    y = streams[0].standard_normal(shape)
    y, poses = _run(model, y, cond, cfg, n, cfg.n_steps, streams, external=external, trace=trace)
    return JointLatent(y, n), poses


def resample_from(model, y0, cond, cfg: SamplerConfig, t_start: float, rng=None, n=3,
                  known=None, mask=None, trace=None):
    """Invert ``y0`` to ``t_start`` with trajectory noise, then sample back to zero.

    ``t_start`` is snapped to the step grid.  With ``t_start = 1`` this is exactly
    :func:`generate` (or :func:`inpaint`) under the same seed.
    """
    y0 = np.asarray(y0, dtype=float)
    streams = rng_streams(cfg.seed if rng is None else rng)
    noise = streams[0].standard_normal(y0.shape)
    start = int(round(t_start * cfg.n_steps))
    if start == 0:
        try:
            poses = _poses_from_rays(y0, n)
        except (RayRecoveryError, np.linalg.LinAlgError, ValueError):
            poses = None
        return JointLatent(y0.copy(), n), poses
    y = invert_to(y0, start / cfg.n_steps, noise)
    m = None if mask is None else (mask.mask if isinstance(mask, LatentMask) else np.asarray(mask))
    k = None if known is None else y0
    y, poses = _run(model, y, cond, cfg, n, start, streams, known=k, mask=m, trace=trace)
    return JointLatent(y, n), poses


def inpaint(model, known: JointLatent, mask: LatentMask, cond, cfg: SamplerConfig, rng=None,
            trace=None):
    """Fill the entries where ``mask == 0``; entries with ``mask == 1`` come back unchanged."""
    m = mask.mask if isinstance(mask, LatentMask) else np.asarray(mask, dtype=float)
    if m.shape != known.data.shape:
        raise ValueError(f"mask shape {m.shape} does not match latent {known.data.shape}")
    if not np.all(np.isfinite(known.data[m == 1])):
        raise ValueError("known latents must be finite where the mask is set")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask entries must be exactly 0 or 1")
    if cfg.swap_enabled:
        raise ValueError("external guidance is not used while inpainting; disable swap_enabled")
    streams = rng_streams(cfg.seed if rng is None else rng)
    y = streams[0].standard_normal(known.data.shape)
    y, poses = _run(model, y, cond, cfg, known.n, cfg.n_steps, streams,
                    known=known.data, mask=m, trace=trace)
    return JointLatent(y, known.n), poses
