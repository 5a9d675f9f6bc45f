"""Rectified flow on a 1-D Gaussian, where the exact velocity field is known.

Data ~ N(2, 0.5^2), noise ~ N(0, 1), straight-line paths.  The learned field is
compared against the closed-form marginal field and then integrated with Euler
steps from noise back to data.

    python demos/flow_on_gaussian.py
"""
import numpy as np

from raysplat.nets import build_model
from raysplat.rf_core import TrainConfig, euler_step, train_velocity

mu, var = 2.0, 0.25
data = np.random.default_rng(0).normal(mu, np.sqrt(var), size=(20000, 1))
model = train_velocity(build_model({"kind": "linear", "freqs": 4}), data, None,
                       TrainConfig(steps=4000, batch_size=512, lr=1e-2, cond_dropout=0.0, log_every=0),
                       np.random.default_rng(1))

print(" t     learned  exact   (velocity at the marginal mean + 1 std)")
for t in (0.1, 0.3, 0.5, 0.7, 0.9):
    s2 = t**2 + (1 - t) ** 2 * var
    y = (1 - t) * mu + np.sqrt(s2)
    exact = -mu + (t - (1 - t) * var) / s2 * (y - (1 - t) * mu)
    v, _ = model.forward(np.array([[y]]), np.array([t]), None, np.ones(1))
    print(f"{t:.1f}  {v[0, 0]:8.4f} {exact:8.4f}")

y = np.random.default_rng(2).standard_normal((10000, 1))
for i in range(100, 0, -1):
    v, _ = model.forward(y, np.full(len(y), i / 100), None, np.ones(len(y)))
    y = euler_step(y, v, i / 100, (i - 1) / 100)
print(f"samples: mean {y.mean():.3f} std {y.std():.3f} (target {mu}, {np.sqrt(var)})")
