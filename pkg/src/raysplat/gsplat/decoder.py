"""Pixel-aligned Gaussian decoding from joint latents, its losses and training loop.

Every frame pixel of every view emits one isotropic Gaussian placed on that
pixel's ray, ``mu = c + t d``.  A small per-pixel MLP reads the image and depth
latent cell the pixel falls in, the pixel's camera-frame direction and (by
default) the view's mean latent, and predicts corrections to four squashing
heads.  All-zero parameters give the default Gaussian: depth ``depth_prior``
along the ray, opacity ``0.99 sigmoid(-1.7)``, the latent color and a one-pixel
footprint.  Fresh models also start the depth head on a linear read of the
relative depth latent, so a model fed depth begins from the latent's layout
while one with the depth group zeroed begins at the prior.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from ..latent import DOWNSAMPLE, JointLatent
from ..nets import Adam
from ..rays import identity_ray_directions
from .cloud import GaussianCloud
from .render import isotropic_conic_backward, render, render_backward

log = logging.getLogger(__name__)

ALPHA_OFFSET = -1.7  # low default opacity: overlapping views blend instead of occluding
SCALE_OFFSET = np.log(0.8)
HEADS = 6  # depth, opacity, rgb, log-scale
W_MSE, W_SSIM = 1.0, 0.05
# relative depth in [-1, 1] -> softplus argument; spans roughly 0.5x to 1.7x the prior
DEPTH_GAIN = 0.85


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


class DecoderModel:
    """Per-pixel two-layer MLP with a linear skip into the Gaussian heads."""

    def __init__(self, hidden=32, use_depth=True, pooled=True, depth_prior=6.0, params=None, rng=None):
        self.hidden, self.use_depth, self.pooled = int(hidden), bool(use_depth), bool(pooled)
        self.depth_prior = float(depth_prior)
        self.n_features = 9 + (6 if pooled else 0)
        F, H = self.n_features, self.hidden
        self.shapes = {"W1": (F, H), "b1": (H,), "W2": (H, HEADS), "b2": (HEADS,), "Ws": (F, HEADS)}
        self.size = sum(int(np.prod(s)) for s in self.shapes.values())
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = np.zeros(self.size)
            b = self.blocks(params)
            b["W1"][...] = rng.normal(0, 1 / np.sqrt(F), (F, H))
            b["Ws"][3:6, 0] = DEPTH_GAIN / 3
        self.params = np.asarray(params, dtype=float).copy()
        if self.params.shape != (self.size,):
            raise ValueError(f"expected {self.size} decoder parameters, got {self.params.shape}")
        self.history: list = []

    @property
    def config(self):
        return {"hidden": self.hidden, "use_depth": self.use_depth, "pooled": self.pooled,
                "depth_prior": self.depth_prior}

    def blocks(self, flat=None):
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[name] = flat[i : i + n].reshape(shape)
            i += n
        return out

    def copy(self):
        m = DecoderModel(params=self.params, **self.config)
        m.history = list(self.history)
        return m

    @staticmethod
    def last_layer(flat_grad_or_params, model):
        b = model.blocks(flat_grad_or_params)
        return np.concatenate([b["W2"].ravel(), b["b2"], b["Ws"].ravel()])

    def features(self, joint: JointLatent, poses, size=None):
        """(K, H*W, F) per-pixel inputs, plus frame size."""
        K, _, h, w = joint.data.shape
        if len(poses) != K:
            raise ValueError(f"need {K} poses, got {len(poses)}")
        size = size or h * DOWNSAMPLE
        up = size // h
        img = joint.image.repeat(up, axis=2).repeat(up, axis=3)
        dep = joint.depth.repeat(up, axis=2).repeat(up, axis=3)
        if not self.use_depth:
            dep = np.zeros_like(dep)
        feats = []
        for k, pose in enumerate(poses):
            dcam = identity_ray_directions(pose.intrinsics, size, size)
            parts = [img[k].reshape(3, -1).T, dep[k].reshape(3, -1).T, dcam.reshape(-1, 3)]
            if self.pooled:
                ctx = np.concatenate([joint.image[k].mean(axis=(1, 2)), joint.depth[k].mean(axis=(1, 2))])
                if not self.use_depth:
                    ctx[3:] = 0
                parts.append(np.broadcast_to(ctx, (size * size, 6)))
            feats.append(np.concatenate(parts, axis=1))
        return np.stack(feats), size

    def heads(self, X):
        p = self.blocks()
        z = X @ p["W1"] + p["b1"]
        h = np.tanh(z)
        out = h @ p["W2"] + p["b2"] + X @ p["Ws"]
        return out, (X, h)

    def heads_backward(self, cache, dout):
        X, h = cache
        p = self.blocks()
        F = X.shape[-1]
        X2, h2, d2 = X.reshape(-1, F), h.reshape(-1, self.hidden), dout.reshape(-1, HEADS)
        grad = np.zeros(self.size)
        g = self.blocks(grad)
        g["W2"][...] = h2.T @ d2
        g["b2"][...] = d2.sum(0)
        g["Ws"][...] = X2.T @ d2
        dz = (d2 @ p["W2"].T) * (1 - h2**2)
        g["W1"][...] = X2.T @ dz
        g["b1"][...] = dz.sum(0)
        return grad


@dataclass
class _Decoded:
    cloud: GaussianCloud
    cache: tuple


def _decode(model: DecoderModel, joint: JointLatent, poses, size=None):
    X, size = model.features(joint, poses, size)
    out, hcache = model.heads(X)
    K, P = X.shape[:2]
    o_d, o_a, o_c, o_s = out[..., 0], out[..., 1], out[..., 2:5], out[..., 5]
    t = model.depth_prior * _softplus(o_d) / np.log(2.0)
    alpha = 0.99 * _sigmoid(o_a + ALPHA_OFFSET)
    base = np.clip((X[..., 0:3] + 1) / 2, 1e-3, 1 - 1e-3)
    color = _sigmoid(np.log(base / (1 - base)) + o_c)
    centers, dirs, foot = [], [], []
    for k, pose in enumerate(poses):
        dcam = identity_ray_directions(pose.intrinsics, size, size).reshape(-1, 3)
        dirs.append(dcam @ pose.R)
        centers.append(np.broadcast_to(pose.center, (P, 3)))
        foot.append(np.full(P, 2.0 / (size * pose.intrinsics.fx)))
    dirs, centers, foot = np.stack(dirs), np.stack(centers), np.stack(foot)
    scale = t * foot * np.exp(o_s + SCALE_OFFSET)
    mu = centers + t[..., None] * dirs
    cloud = GaussianCloud(mu.reshape(-1, 3), alpha.reshape(-1), scale.reshape(-1, 1), None, color.reshape(-1, 3))
    return _Decoded(cloud, (hcache, out, t, alpha, color, scale, dirs))


def decode_gaussians(model: DecoderModel, joint: JointLatent, poses, size=None) -> GaussianCloud:
    """One Gaussian per frame pixel per view, ordered view-major then row-major."""
    return _decode(model, joint, poses, size).cloud


def _decode_backward(model, decoded: _Decoded, g_mu, g_alpha, g_color, g_scale):
    hcache, out, t, alpha, color, scale, dirs = decoded.cache
    K, P = t.shape
    g_mu = g_mu.reshape(K, P, 3)
    g_t = (g_mu * dirs).sum(-1) + g_scale.reshape(K, P) * scale / t
    o_d = out[..., 0]
    dout = np.zeros_like(out)
    dout[..., 0] = g_t * model.depth_prior * _sigmoid(o_d) / np.log(2.0)
    dout[..., 1] = g_alpha.reshape(K, P) * alpha * (1 - alpha / 0.99)
    dout[..., 2:5] = g_color.reshape(K, P, 3) * color * (1 - color)
    dout[..., 5] = g_scale.reshape(K, P) * scale
    return model.heads_backward(hcache, dout)


# -- losses -------------------------------------------------------------------------

_WIN = 7


def _box(x):
    return convolve2d(x, np.ones((_WIN, _WIN)) / _WIN**2, mode="valid")


def _box_adjoint(g):
    return convolve2d(g, np.ones((_WIN, _WIN)) / _WIN**2, mode="full")


def ssim_loss(x, y, with_grad=False):
    """``1 - mean SSIM`` over valid 7x7 uniform windows, per channel; H x W x C inputs."""
    c1, c2 = 0.01**2, 0.03**2
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    total, grad = 0.0, np.zeros_like(x)
    C = x.shape[2]
    for ch in range(C):
        a, b = x[..., ch], y[..., ch]
        ma, mb = _box(a), _box(b)
        saa = _box(a * a) - ma**2
        sbb = _box(b * b) - mb**2
        sab = _box(a * b) - ma * mb
        A1, A2 = 2 * ma * mb + c1, 2 * sab + c2
        B1, B2 = ma**2 + mb**2 + c1, saa + sbb + c2
        s = A1 * A2 / (B1 * B2)
        n = s.size
        total += s.mean()
        if with_grad:
            gs = np.full_like(s, -1.0 / (n * C))
            # d s / d (ma, saa, sab)
            d_ma = gs * (2 * mb * A2 / (B1 * B2) - 2 * ma * s / B1)
            d_sab = gs * (2 * A1 / (B1 * B2))
            d_saa = gs * (-s / B2)
            # ma = box(a), saa = box(a^2) - ma^2, sab = box(ab) - ma mb
            d_ma_total = d_ma - 2 * ma * d_saa - mb * d_sab
            grad[..., ch] = (_box_adjoint(d_ma_total) + 2 * a * _box_adjoint(d_saa)
                             + b * _box_adjoint(d_sab))
    loss = 1.0 - total / C
    return (loss, grad) if with_grad else loss


def gradient_loss(x, y, with_grad=False):
    """Mean squared difference of horizontal and vertical finite differences."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    r = x - y
    dx, dy = np.diff(r, axis=1), np.diff(r, axis=0)
    loss = float(np.mean(dx**2) + np.mean(dy**2))
    if not with_grad:
        return loss
    g = np.zeros_like(r)
    gdx = 2 * dx / dx.size
    gdy = 2 * dy / dy.size
    g[:, 1:] += gdx
    g[:, :-1] -= gdx
    g[1:] += gdy
    g[:-1] -= gdy
    return loss, g


def adaptive_weight(grad_main_norm: float, grad_aux_norm: float) -> float:
    """``0.1 * |grad main| / |grad aux|`` with the ratio clamped to [0, 1e4]."""
    if grad_main_norm < 0 or grad_aux_norm < 0:
        raise ValueError("gradient norms must be non-negative")
    if grad_aux_norm == 0:
        return 0.0
    return 0.1 * float(np.clip(grad_main_norm / grad_aux_norm, 0.0, 1e4))


def main_loss(rendered, target, with_grad=False):
    """``w1 MSE + w2 (1 - SSIM)`` on one H x W x 3 image."""
    r = np.asarray(rendered, dtype=float) - np.asarray(target, dtype=float)
    mse = float(np.mean(r**2))
    if not with_grad:
        return W_MSE * mse + W_SSIM * ssim_loss(rendered, target)
    s, gs = ssim_loss(rendered, target, with_grad=True)
    return W_MSE * mse + W_SSIM * s, W_MSE * 2 * r / r.size + W_SSIM * gs


def decoder_loss(rendered, target, aux_enabled=False, aux_fn=gradient_loss, w3=None):
    """Scalar loss ``w1 MSE + w2 (1 - SSIM) + w3 aux``; ``w3`` defaults to 0.1 when aux is on."""
    loss = main_loss(rendered, target)
    if aux_enabled:
        loss += (0.1 if w3 is None else w3) * aux_fn(rendered, target)
    return loss


# -- training -------------------------------------------------------------------------


@dataclass
class DecoderSample:
    """Decoder input latents and poses plus the frames it should reproduce."""

    joint: JointLatent
    poses: list
    target_poses: list
    target_images: np.ndarray


@dataclass
class DecoderTrainConfig:
    steps: int = 200
    lr: float = 1e-3
    lr_decay: str = "cosine"
    aux_threshold: float = 0.5
    views_per_step: int = 2
    scenes_per_step: int = 2
    seed: int = 0
    ema: float = 0.95  # returned parameters are a moving average of the iterates


@dataclass
class DecoderTraceRecord:
    step: int
    loss: float
    aux_active: bool
    w3: float


@dataclass
class DecoderTrace:
    records: list = field(default_factory=list)

    @property
    def activation_step(self):
        for r in self.records:
            if r.aux_active:
                return r.step
        return None


def render_views(model: DecoderModel, joint, poses, target_poses, size=None):
    cloud = decode_gaussians(model, joint, poses, size)
    size = size or joint.data.shape[2] * DOWNSAMPLE
    return np.stack([render(cloud, p, size, size)[0] for p in target_poses])


def _step_grads(model, sample: DecoderSample, views, aux_active, aux_fn):
    dec = _decode(model, sample.joint, sample.poses)
    cloud = dec.cloud
    size = sample.target_images.shape[1]
    G = len(cloud)
    acc_main = [np.zeros((G, 3)), np.zeros(G), np.zeros((G, 3)), np.zeros(G)]
    acc_aux = [np.zeros((G, 3)), np.zeros(G), np.zeros((G, 3)), np.zeros(G)]
    main_total, aux_total = 0.0, 0.0
    for v in views:
        pose, target = sample.target_poses[v], sample.target_images[v]
        img, _, proj = render(cloud, pose, size, size, return_projection=True)
        lm, gm = main_loss(img, target, with_grad=True)
        main_total += lm / len(views)
        for acc, g_img in [(acc_main, gm)] + ([(acc_aux, aux_fn(img, target, with_grad=True)[1])] if aux_active else []):
            gc, ga, gmean, gconic = render_backward(cloud, proj, g_img / len(views))
            acc[0] += gc
            acc[1] += ga
            g_mu, g_s = isotropic_conic_backward(proj, cloud.scale[:, 0], gconic)
            acc[2] += np.einsum("gij,gi->gj", proj[0].M, gmean) + g_mu
            acc[3] += g_s
        if aux_active:
            aux_total += aux_fn(img, target) / len(views)
    g_main = _decode_backward(model, dec, acc_main[2], acc_main[1], acc_main[0], acc_main[3])
    g_aux = None
    if aux_active:
        g_aux = _decode_backward(model, dec, acc_aux[2], acc_aux[1], acc_aux[0], acc_aux[3])
    return main_total, aux_total, g_main, g_aux


def train_decoder(model: DecoderModel, samples, config: DecoderTrainConfig, aux_fn=gradient_loss,
                  trace: DecoderTrace | None = None):
    """Adam on the decoder; the aux term switches on at ``aux_threshold * steps``."""
    if not samples:
        raise ValueError("no training samples")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.size, config.lr)
    start_aux = int(np.ceil(config.aux_threshold * config.steps))
    avg = model.params.copy()
    for step in range(config.steps):
        aux_active = step >= start_aux
        lm = la = 0.0
        g_main, g_aux = np.zeros(model.size), np.zeros(model.size)
        for sample in [samples[i] for i in rng.integers(len(samples), size=config.scenes_per_step)]:
            nv = len(sample.target_poses)
            views = rng.choice(nv, size=min(config.views_per_step, nv), replace=False)
            parts = _step_grads(model, sample, views, aux_active, aux_fn)
            lm += parts[0] / config.scenes_per_step
            la += parts[1] / config.scenes_per_step
            g_main += parts[2] / config.scenes_per_step
            if aux_active:
                g_aux += parts[3] / config.scenes_per_step
        w3 = 0.0
        grad = g_main
        if aux_active:
            w3 = adaptive_weight(
                np.linalg.norm(DecoderModel.last_layer(g_main, model)),
                np.linalg.norm(DecoderModel.last_layer(g_aux, model)),
            )
            grad = g_main + w3 * g_aux
        loss = lm + w3 * la
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"decoder training diverged at step {step}")
        lr = config.lr
        if config.lr_decay == "cosine":
            lr = config.lr * 0.5 * (1 + np.cos(np.pi * step / config.steps))
        model.params = opt.step(model.params, grad, lr)
        avg = config.ema * avg + (1 - config.ema) * model.params
        model.history.append(loss)
        if trace is not None:
            trace.records.append(DecoderTraceRecord(step, float(loss), aux_active, float(w3)))
    if config.ema > 0:
        model.params = avg
    return model


def validation_psnr(model: DecoderModel, samples) -> float:
    from ..harness.metrics import psnr

    vals = []
    for s in samples:
        imgs = render_views(model, s.joint, s.poses, s.target_poses, s.target_images.shape[1])
        vals += [psnr(np.clip(i, 0, 1), t) for i, t in zip(imgs, s.target_images)]
    return float(np.mean(vals))


def save_decoder(path, model: DecoderModel):
    np.savez(path, params=model.params, config=json.dumps(model.config))


def load_decoder(path) -> DecoderModel:
    with np.load(path) as z:
        return DecoderModel(params=z["params"], **json.loads(str(z["config"])))
