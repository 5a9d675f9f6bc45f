import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raysplat.latent import SceneCondition
from raysplat.nets import build_model
from raysplat.rf_core import (
    DivergenceError,
    GuidanceSpec,
    TrainConfig,
    cfm_loss_and_grad,
    euler_step,
    guided_velocity,
    interpolate_path,
    invert_to,
    load_checkpoint,
    predict_destination,
    sample_training_time,
    save_checkpoint,
    train_velocity,
)

from conftest import ConstantField, PointMassField


def test_path_endpoints_and_linearity(rng):
    y0, y1 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    assert np.array_equal(interpolate_path(y0, y1, 0.0), y0)
    assert np.array_equal(interpolate_path(y0, y1, 1.0), y1)
    assert np.allclose(interpolate_path(np.zeros(5), np.ones(5), 0.25), 0.25)
    with pytest.raises(ValueError):
        interpolate_path(np.zeros(3), np.zeros(4), 0.5)


def test_path_per_sample_times(rng):
    y0, y1 = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
    t = np.array([0.0, 0.5, 1.0])
    out = interpolate_path(y0, y1, t)
    assert np.array_equal(out[0], y0[0]) and np.array_equal(out[2], y1[2])


def test_euler_and_destination_formulas(rng):
    y = rng.normal(size=(4, 4))
    assert np.array_equal(euler_step(y, np.zeros_like(y), 0.7, 0.3), y)
    assert np.array_equal(predict_destination(y, rng.normal(size=y.shape), 0.0), y)
    assert np.allclose(predict_destination(y, np.full_like(y, 2.0), 0.5), y - 1)
    y0, y1 = rng.normal(size=(2, 4, 4))
    yt = (1 - 0.3) * y0 + 0.3 * y1
    assert np.allclose(predict_destination(yt, y1 - y0, 0.3), y0, atol=1e-14)


def test_inversion(rng):
    y0, z = rng.normal(size=(2, 6))
    assert np.array_equal(invert_to(y0, 0.0, z), y0)
    assert np.array_equal(invert_to(y0, 1.0, z), z)
    assert np.allclose(invert_to(np.zeros(6), 190 / 200, z), 0.95 * z)


def test_point_mass_single_euler_step(rng):
    target = rng.normal(size=(3, 12, 2, 2))
    field = PointMassField(target)
    y1 = rng.normal(size=target.shape)
    y = euler_step(y1, field(y1, 1.0), 1.0, 0.0)
    assert np.abs(y - target).max() <= 1e-12


def test_training_time_distribution():
    class Zero:
        def standard_normal(self, size=None):
            return np.zeros(size) if size else 0.0

    assert sample_training_time(Zero()) == 0.5
    t = sample_training_time(np.random.default_rng(0), 100000)
    assert 0 < t.min() and t.max() < 1
    assert abs(t.mean() - 0.5) < 0.005
    assert abs(np.median(t) - 0.5) < 0.01


def tiny_mlp(rng, cond_dim=3):
    arch = {"kind": "mlp", "channels": 2, "h": 2, "w": 2, "hidden": 8, "freqs": 2, "cond_dim": cond_dim}
    return build_model(arch, rng=rng)


def test_perfect_fit_has_zero_loss_and_gradient(rng):
    m = build_model({"kind": "linear", "freqs": 1})
    # a(t)=0, b(t)=1: v = 1 everywhere, matching y1 - y0 = 1
    m.blocks()["b_t"][0] = 1.0
    y0 = rng.integers(-5, 5, size=(4, 5)).astype(float)
    loss, grad = cfm_loss_and_grad(m, y0, y0 + 1, rng.random(4))
    assert loss == 0.0 and not np.any(grad)


def test_zero_model_loss_is_one():
    m = build_model({"kind": "linear", "freqs": 1})
    loss, _ = cfm_loss_and_grad(m, np.zeros((2, 3)), np.ones((2, 3)), 0.5)
    assert loss == 1.0


def test_loss_rejects_non_finite():
    m = build_model({"kind": "linear", "freqs": 1})
    with pytest.raises(ValueError):
        cfm_loss_and_grad(m, np.full((1, 2), np.nan), np.zeros((1, 2)), 0.5)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    m = tiny_mlp(rng)
    assert m.size <= 1000
    y0, y1 = rng.normal(size=(2, 3, 2, 2, 2, 2))
    t = rng.random(3)
    cond = (rng.normal(size=(3, 3)), np.array([0.0, 1.0, 0.0]))
    _, grad = cfm_loss_and_grad(m, y0, y1, t, cond)
    p0 = m.params.copy()
    eps = 1e-6
    for _ in range(20):
        u = rng.normal(size=m.size)
        m.params = p0 + eps * u
        lp, _ = cfm_loss_and_grad(m, y0, y1, t, cond)
        m.params = p0 - eps * u
        lm, _ = cfm_loss_and_grad(m, y0, y1, t, cond)
        fd, an = (lp - lm) / (2 * eps), grad @ u
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an))
    m.params = p0


def test_guidance_identities(rng):
    n = 3
    base, delta = rng.normal(size=(2, 2, 2 * n + 6, 2, 2))
    model = ConstantField(base, delta)
    y = np.zeros_like(base)
    cond = SceneCondition(np.ones(4))
    v_cond, v_null = base + delta, base
    assert np.array_equal(guided_velocity(model, y, 0.5, cond, GuidanceSpec(1, 1, 1), n), v_cond)
    assert np.array_equal(guided_velocity(model, y, 0.5, cond, GuidanceSpec(0, 0, 0), n), v_null)
    out = guided_velocity(model, y, 0.5, cond, GuidanceSpec(2, 1, 1), n)
    assert np.allclose(out[:, :n], v_null[:, :n] + 2 * delta[:, :n])
    assert np.array_equal(out[:, n:], v_cond[:, n:])
    out = guided_velocity(model, y, 0.5, cond, GuidanceSpec(7, 5, 1), n)
    assert np.allclose(out[:, n : 2 * n], v_null[:, n : 2 * n] + 5 * delta[:, n : 2 * n])


def test_guidance_needs_null_training(rng):
    m = tiny_mlp(rng)
    with pytest.raises(ValueError):
        guided_velocity(m, np.zeros((2, 2, 2, 2)), 0.5, SceneCondition(np.ones(3)), GuidanceSpec(2, 2, 2))
    with pytest.raises(ValueError):
        GuidanceSpec(-1, 1, 1)


def test_gaussian_target_marginal_field():
    mu, var = 2.0, 0.25
    rng = np.random.default_rng(0)
    data = rng.normal(mu, np.sqrt(var), size=(20000, 1))
    m = build_model({"kind": "linear", "freqs": 4})
    cfg = TrainConfig(steps=10000, batch_size=512, lr=1e-2, cond_dropout=0.0, log_every=0)
    m = train_velocity(m, data, None, cfg, np.random.default_rng(1))
    err = []
    for t in np.linspace(0, 1, 101):
        s2 = t**2 + (1 - t) ** 2 * var
        ys = (1 - t) * mu + np.sqrt(s2) * np.array([-1.5, 0.0, 1.5])
        exact = -mu + (t - (1 - t) * var) / s2 * (ys - (1 - t) * mu)
        v, _ = m.forward(ys[:, None], np.full(3, t), None, np.ones(3))
        err.append(v[:, 0] - exact)
    assert np.sqrt(np.mean(np.square(err))) < 5e-2


def test_overfit_single_sample():
    m = build_model({"kind": "linear", "freqs": 8})
    data = np.array([[1.5]])
    cfg = TrainConfig(steps=20000, batch_size=256, lr=1e-2, cond_dropout=0.0, log_every=0)
    m = train_velocity(m, data, None, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    y1 = rng.standard_normal((4000, 1))
    # the exact field grows like 1/t near the data end, so score mid-path times
    losses = [cfm_loss_and_grad(m, np.repeat(data, 4000, 0), y1, t)[0] for t in np.linspace(0.2, 0.8, 7)]
    assert np.mean(losses) < 1e-3


def test_zero_steps_leave_parameters(rng):
    m = tiny_mlp(rng)
    out = train_velocity(m, rng.normal(size=(4, 2, 2, 2, 2)), None, TrainConfig(steps=0), rng)
    assert np.array_equal(out.params, m.params)
    assert not out.null_trained


def test_divergence_is_reported(rng):
    m = tiny_mlp(rng)
    data = np.full((2, 2, 2, 2, 2), 1e200)
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        train_velocity(m, data, None, TrainConfig(steps=3, batch_size=2), rng)


def test_checkpoint_round_trip(tmp_path, rng):
    arch = {"kind": "mlp", "channels": 2, "h": 2, "w": 2, "hidden": 8, "freqs": 2, "dtype": "float32"}
    m = build_model(arch, rng=rng)
    m.seed, m.steps, m.null_trained = 7, 123, True
    save_checkpoint(tmp_path / "m.sfrf", m)
    back = load_checkpoint(tmp_path / "m.sfrf")
    assert np.array_equal(back.params, m.params)
    assert (back.seed, back.steps, back.null_trained) == (7, 123, True)
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
def test_destination_inverts_any_path_point(t, seed):
    r = np.random.default_rng(seed)
    y0, y1 = r.normal(size=(2, 8))
    yt = interpolate_path(y0, y1, t)
    assert np.allclose(predict_destination(yt, y1 - y0, t), y0, atol=1e-12)
