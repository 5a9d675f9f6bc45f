"""Rectified-flow primitives: straight paths, flow matching, Euler steps, guidance.

Time runs from ``t = 0`` (data) to ``t = 1`` (Gaussian noise) along
``y_t = t y1 + (1 - t) y0``.  Generation integrates from ``t = 1`` down to 0.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .nets import Adam, VelocityModel, build_model

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceSpec:
    """Classifier-free guidance scale per channel group (1 = plain conditional)."""

    scale_image: float = 7.0
    scale_depth: float = 5.0
    scale_ray: float = 1.0

    def __post_init__(self):
        if min(self.scale_image, self.scale_depth, self.scale_ray) < 0:
            raise ValueError("guidance scales must be non-negative")

    @classmethod
    def uniform(cls, s: float) -> "GuidanceSpec":
        return cls(s, s, s)

    @property
    def scales(self):
        return (self.scale_image, self.scale_depth, self.scale_ray)


def interpolate_path(y0, y1, t):
    y0, y1 = np.asarray(y0), np.asarray(y1)
    if y0.shape != y1.shape:
        raise ValueError(f"shape mismatch: {y0.shape} vs {y1.shape}")
    t = _bcast_time(t, y0)
    return t * y1 + (1 - t) * y0


def _bcast_time(t, y):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (y.ndim - t.ndim))


def euler_step(y_t, v, t_from, t_to):
    return y_t + (t_to - t_from) * v


def predict_destination(y_t, v, t):
    return y_t - t * v


def invert_to(y0, t_k, noise):
    """Forward re-noising of clean latents to time ``t_k`` along the straight path."""
    return (1 - t_k) * np.asarray(y0) + t_k * np.asarray(noise)


def sample_training_time(rng, size=None):
    """Logit-normal(0, 1): ``sigmoid(z)`` with ``z ~ N(0, 1)``."""
    z = rng.standard_normal(size)
    return 1.0 / (1.0 + np.exp(-z))


def _cond_arrays(model, cond, batch):
    """Accepts None, a SceneCondition, or (descriptor array, null flags)."""
    if cond is None:
        return np.zeros((batch, model.cond_dim)), np.ones(batch)
    if isinstance(cond, tuple):
        desc, null = cond
        return np.asarray(desc, dtype=float).reshape(batch, -1), np.asarray(null, dtype=float)
    desc = np.broadcast_to(cond.descriptor, (batch, model.cond_dim))
    return desc, np.full(batch, float(cond.null))


def cfm_loss_and_grad(model: VelocityModel, y0, y1, t, cond=None):
    """Mean squared error against the straight-path velocity ``y1 - y0`` and its gradient.

    ``y0``/``y1`` carry a leading batch axis; ``t`` is a scalar or one time per sample.
    """
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    if y0.shape != y1.shape:
        raise ValueError(f"shape mismatch: {y0.shape} vs {y1.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=float), (y0.shape[0],))
    if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(y1)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite input to flow-matching loss")
    yt = interpolate_path(y0, y1, t)
    desc, null = _cond_arrays(model, cond, y0.shape[0])
    v, cache = model.forward(yt, t, desc, null)
    resid = v - (y1 - y0)
    loss = float(np.mean(resid**2))
    grad = model.backward(cache, 2 * resid / resid.size)
    return loss, grad


def guided_velocity(model: VelocityModel, y_t, t, cond, spec: GuidanceSpec, n: int | None = None):
    """Per-group classifier-free guidance on one un-batched latent.

    With ``n`` given, ``y_t`` is a ``K x (2n + 6) x h x w`` joint latent and the
    image/depth/ray groups get their own scales; otherwise ``spec.scale_image``
    applies to every element.
    """
    scales = spec.scales if n is not None else (spec.scale_image,)
    v_cond = model(y_t, t, cond)
    if all(s == 1 for s in scales):
        return v_cond
    if not model.null_trained:
        raise ValueError("guidance needs a model trained with condition dropout")
    v_null = model(y_t, t, None)
    if n is None:
        groups = [slice(None)]
    else:
        groups = [slice(0, n), slice(n, 2 * n), slice(2 * n, 2 * n + 6)]
    out = np.empty_like(v_cond)
    for g, s in zip(groups, scales):
        idx = (slice(None), g) if n is not None else g
        if s == 1:
            out[idx] = v_cond[idx]
        elif s == 0:
            out[idx] = v_null[idx]
        else:
            out[idx] = v_null[idx] + s * (v_cond[idx] - v_null[idx])
    return out


# -- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    cond_dropout: float = 0.1
    lr_decay: str = "cosine"
    log_every: int = 200


def train_velocity(model: VelocityModel, latents, conditions, config: TrainConfig, rng):
    """Conditional flow matching with Adam; returns a trained copy of ``model``.

    ``latents`` has a leading sample axis; ``conditions`` is ``(samples, cond_dim)``
    or None.  The per-step loss is kept in ``model.history``.
    """
    model = model.copy()
    latents = np.asarray(latents, dtype=float)
    S = latents.shape[0]
    if conditions is None:
        conditions = np.zeros((S, model.cond_dim))
    conditions = np.asarray(conditions, dtype=float).reshape(S, model.cond_dim)
    opt = Adam(model.size, config.lr, dtype=model.dtype)
    for step in range(config.steps):
        idx = rng.integers(0, S, size=config.batch_size)
        y0 = latents[idx]
        y1 = rng.standard_normal(y0.shape)
        t = sample_training_time(rng, config.batch_size)
        null = (rng.random(config.batch_size) < config.cond_dropout).astype(float)
        loss, grad = cfm_loss_and_grad(model, y0, y1, t, (conditions[idx], null))
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss at step {step}")
        lr = config.lr
        if config.lr_decay == "cosine":
            lr = config.lr * 0.5 * (1 + np.cos(np.pi * step / config.steps))
        model.params = opt.step(model.params, grad, lr).astype(model.dtype)
        model.history.append(loss)
        if config.log_every and step % config.log_every == 0:
            log.info("rf step %d loss %.5f", step, loss)
    model.steps += config.steps
    if config.cond_dropout > 0 and config.steps > 0:
        model.null_trained = True
    return model


# -- checkpoints ------------------------------------------------------------------

_MAGIC = b"SFRF"
_VERSION = 1


def save_checkpoint(path, model: VelocityModel):
    arch = json.dumps(dict(model.arch, null_trained=model.null_trained), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<I", model.size))
        fh.write(np.asarray(model.params, dtype="<f4").tobytes())
        fh.write(struct.pack("<QQ", model.seed, model.steps))


def load_checkpoint(path) -> VelocityModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a velocity-model checkpoint")
        version, n_arch = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = json.loads(fh.read(n_arch).decode())
        (size,) = struct.unpack("<I", fh.read(4))
        params = np.frombuffer(fh.read(4 * size), dtype="<f4")
        seed, steps = struct.unpack("<QQ", fh.read(16))
    model = build_model(arch, params.astype(arch.get("dtype", "float64")))
    model.seed, model.steps = seed, steps
    return model
