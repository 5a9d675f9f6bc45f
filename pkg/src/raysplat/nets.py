"""Small velocity networks with hand-written backward passes.

Both models map ``(y_t, t, condition)`` to a velocity of the same shape as
``y_t``.  Parameters live in one flat vector so that optimizers, checkpoints
and finite-difference checks can treat every model alike.
"""
from __future__ import annotations

import numpy as np


def time_features(t, freqs: int) -> np.ndarray:
    """[1, t, sin(pi k t), cos(pi k t) for k = 1..freqs], shape (B, 2 + 2 freqs)."""
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    k = np.arange(1, freqs + 1)
    return np.concatenate(
        [np.ones_like(t), t, np.sin(np.pi * k * t), np.cos(np.pi * k * t)], axis=1
    )


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


class VelocityModel:
    """Base class: flat parameter vector carved into named blocks."""

    kind = "base"

    def __init__(self, arch: dict, params=None, rng=None):
        self.arch = dict(arch)
        self.dtype = np.dtype(self.arch.get("dtype", "float64"))
        self.shapes = self._param_shapes()
        self.size = sum(int(np.prod(s)) for s in self.shapes.values())
        if params is None:
            params = self._init_params(rng if rng is not None else np.random.default_rng(0))
        self.params = np.asarray(params, dtype=self.dtype).copy()
        if self.params.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {self.params.shape}")
        self.null_trained = bool(self.arch.get("null_trained", False))
        self.seed = 0
        self.steps = 0
        self.history: list[float] = []

    @property
    def cond_dim(self) -> int:
        return int(self.arch.get("cond_dim", 0))

    def blocks(self, flat=None):
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[name] = flat[i : i + n].reshape(shape)
            i += n
        return out

    def copy(self):
        arch = dict(self.arch, null_trained=self.null_trained)
        m = type(self)(arch, self.params)
        m.seed, m.steps, m.history = self.seed, self.steps, list(self.history)
        return m

    def _cond_features(self, desc, null):
        B = len(null)
        desc = np.zeros((B, self.cond_dim)) if desc is None else np.asarray(desc, dtype=float)
        desc = desc.reshape(B, self.cond_dim)
        null = np.asarray(null, dtype=float).reshape(B, 1)
        return np.concatenate([desc * (1 - null), null], axis=1).astype(self.dtype)

    def __call__(self, y, t, cond=None):
        """Single-sample convenience: y without batch axis, cond a SceneCondition or None."""
        if cond is None:
            desc, null = np.zeros((1, self.cond_dim)), np.ones(1)
        else:
            desc, null = cond.descriptor[None], np.array([float(cond.null)])
        v, _ = self.forward(np.asarray(y)[None], np.array([t], dtype=float), desc, null)
        return v[0]

    # subclasses implement _param_shapes, _init_params, forward, backward


class MultiViewMLP(VelocityModel):
    """Per-view two-layer MLP with mean-pooled cross-view context.

    Input ``(B, K, C, h, w)``.  Each view is flattened, mixed with time and
    condition embeddings, and its second layer also sees the mean of the first
    hidden layer over views.  A per-channel, time-dependent skip ``a_c(t) y``
    carries the identity component of the velocity that a narrow bottleneck
    cannot represent.
    """

    kind = "mlp"

    def _param_shapes(self):
        a = self.arch
        D = a["channels"] * a["h"] * a["w"]
        H, E, Dc = a["hidden"], 2 + 2 * a["freqs"], a.get("cond_dim", 0) + 1
        return {
            "W1": (D, H),
            "Wt1": (E, H),
            "Wc1": (Dc, H),
            "b1": (H,),
            "W2": (H, H),
            "Wg": (H, H),
            "Wt2": (E, H),
            "b2": (H,),
            "W3": (H, D),
            "b3": (D,),
            "Ws": (E, a["channels"]),
        }

    def _init_params(self, rng):
        flat = np.zeros(self.size)
        b = self.blocks(flat)
        for name in ("W1", "Wt1", "Wc1", "W2", "Wg", "Wt2"):
            fan_in = b[name].shape[0]
            b[name][...] = rng.normal(0, 1 / np.sqrt(fan_in), b[name].shape)
        b["W3"][...] = rng.normal(0, 0.1 / np.sqrt(b["W3"].shape[0]), b["W3"].shape)
        return flat

    def forward(self, y, t, desc, null):
        a = self.arch
        p = self.blocks()
        y = np.asarray(y, dtype=self.dtype)
        B, K = y.shape[:2]
        C, hw = a["channels"], a["h"] * a["w"]
        X = y.reshape(B, K, C * hw)
        e = time_features(t, a["freqs"]).astype(self.dtype)
        cf = self._cond_features(desc, null)
        H = p["W1"].shape[1]
        z1 = (X.reshape(-1, C * hw) @ p["W1"]).reshape(B, K, H) + (e @ p["Wt1"] + cf @ p["Wc1"] + p["b1"])[:, None]
        h1, s1 = _silu(z1)
        g = h1.mean(axis=1)
        z2 = (h1.reshape(-1, H) @ p["W2"]).reshape(B, K, H) + (g @ p["Wg"] + e @ p["Wt2"] + p["b2"])[:, None]
        h2, s2 = _silu(z2)
        skip = e @ p["Ws"]
        out = h2.reshape(-1, H) @ p["W3"] + p["b3"]
        out = out.reshape(B, K, C, hw) + skip[:, None, :, None] * X.reshape(B, K, C, hw)
        cache = (X, e, cf, z1, h1, s1, g, z2, h2, s2, skip)
        return out.reshape(y.shape), cache

    def backward(self, cache, dout):
        a = self.arch
        p = self.blocks()
        X, e, cf, z1, h1, s1, g, z2, h2, s2, skip = cache
        B, K, D = X.shape
        C, hw = a["channels"], a["h"] * a["w"]
        grad = np.zeros(self.size, dtype=self.dtype)
        gb = self.blocks(grad)
        dout = np.asarray(dout, dtype=self.dtype).reshape(B, K, C, hw)
        gb["Ws"][...] = e.T @ (dout * X.reshape(B, K, C, hw)).sum(axis=(1, 3))
        dout = dout.reshape(B, K, D)
        H = h2.shape[-1]
        gb["W3"][...] = h2.reshape(-1, H).T @ dout.reshape(-1, D)
        gb["b3"][...] = dout.sum(axis=(0, 1))
        dh2 = (dout.reshape(-1, D) @ p["W3"].T).reshape(B, K, H)
        dz2 = dh2 * s2 * (1 + z2 * (1 - s2))
        gb["W2"][...] = h1.reshape(-1, H).T @ dz2.reshape(-1, H)
        dz2_sum = dz2.sum(axis=1)
        gb["Wg"][...] = g.T @ dz2_sum
        gb["Wt2"][...] = e.T @ dz2_sum
        gb["b2"][...] = dz2_sum.sum(axis=0)
        dh1 = (dz2.reshape(-1, H) @ p["W2"].T).reshape(B, K, H) + (dz2_sum @ p["Wg"].T)[:, None] / K
        dz1 = dh1 * s1 * (1 + z1 * (1 - s1))
        gb["W1"][...] = X.reshape(-1, D).T @ dz1.reshape(-1, H)
        dz1_sum = dz1.sum(axis=1)
        gb["Wt1"][...] = e.T @ dz1_sum
        gb["Wc1"][...] = cf.T @ dz1_sum
        gb["b1"][...] = dz1_sum.sum(axis=0)
        return grad


class TimeLinear(VelocityModel):
    """Elementwise affine velocity ``a(t, c) y + b(t, c)`` with Fourier time features.

    Linear in its parameters; for Gaussian data the exact marginal field has
    this form, which makes it a useful analytic test bed.
    """

    kind = "linear"

    def _param_shapes(self):
        E = 2 + 2 * self.arch["freqs"]
        Dc = self.arch.get("cond_dim", 0) + 1
        return {"a_t": (E,), "a_c": (Dc,), "b_t": (E,), "b_c": (Dc,)}

    def _init_params(self, rng):
        return np.zeros(self.size)

    def forward(self, y, t, desc, null):
        p = self.blocks()
        y = np.asarray(y, dtype=self.dtype)
        B = y.shape[0]
        e = time_features(t, self.arch["freqs"]).astype(self.dtype)
        cf = self._cond_features(desc, null)
        a = e @ p["a_t"] + cf @ p["a_c"]
        b = e @ p["b_t"] + cf @ p["b_c"]
        shape = (B,) + (1,) * (y.ndim - 1)
        return a.reshape(shape) * y + b.reshape(shape), (y, e, cf)

    def backward(self, cache, dout):
        y, e, cf = cache
        B = y.shape[0]
        dout = np.asarray(dout, dtype=self.dtype).reshape(B, -1)
        da = (dout * y.reshape(B, -1)).sum(axis=1)
        db = dout.sum(axis=1)
        grad = np.zeros(self.size, dtype=self.dtype)
        gb = self.blocks(grad)
        gb["a_t"][...] = e.T @ da
        gb["a_c"][...] = cf.T @ da
        gb["b_t"][...] = e.T @ db
        gb["b_c"][...] = cf.T @ db
        return grad


MODEL_KINDS = {cls.kind: cls for cls in (MultiViewMLP, TimeLinear)}


def build_model(arch: dict, params=None, rng=None) -> VelocityModel:
    return MODEL_KINDS[arch["kind"]](arch, params, rng)


class Adam:
    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, dtype=float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params, grad, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)
