import json

import numpy as np
import pytest

from raysplat.latent import JointLatent, LatentMask
from raysplat.rays import rotation_angle
from raysplat.rf_core import GuidanceSpec
from raysplat.sampler import SamplerConfig, SamplingError, generate, inpaint, resample_from

from conftest import ConstantField, PointMassField, WobblyPointMass, scene_latent


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_steps=0, t_stop=1)
    with pytest.raises(ValueError):
        SamplerConfig(n_steps=10, t_stop=11)
    with pytest.raises(ValueError):
        SamplerConfig(swap_period=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance={"image": 2, "colour": 1})
    with pytest.raises(ValueError):
        SamplerConfig.from_dict({"n_steps": 10, "bogus": 1})


def test_config_dict_round_trip():
    cfg = SamplerConfig(n_steps=50, t_stop=20, guidance={"image": 2.0})
    assert cfg.guidance == GuidanceSpec(2.0, 5.0, 1.0)
    back = SamplerConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_one_step_point_mass(rng):
    target, poses = scene_latent(rng)
    cfg = SamplerConfig(n_steps=1, t_stop=1)
    out, rec = generate(PointMassField(target.data), None, cfg, target.data.shape)
    assert np.abs(out.data - target.data).max() < 1e-6
    for a, b in zip(rec, poses):
        assert rotation_angle(a.R @ b.R.T) < 1e-6
        assert np.linalg.norm(a.center - b.center) < 1e-6


def test_t_stop_at_n_is_plain_euler(rng):
    target, _ = scene_latent(rng)
    field = WobblyPointMass(target.data, 0.05)
    cfg = SamplerConfig(n_steps=20, t_stop=20, guidance=GuidanceSpec(1, 1, 1))
    trace = []
    out, _ = generate(field, None, cfg, target.data.shape, trace=trace)
    assert [r.destination for r in trace] == [True] + [False] * 19
    # image/depth groups never see the ray channels here, so they follow plain Euler
    y = np.random.default_rng(np.random.SeedSequence(0).spawn(2)[0]).standard_normal(target.data.shape)
    for i in range(20, 0, -1):
        y = y - (1 / 20) * field(y, i / 20)
    assert np.allclose(out.data[:, :6], y[:, :6], atol=1e-12)
    r0 = trace[0].rays_dest
    assert np.allclose(out.data[:, 6:], r0)


def test_manifold_invariant_and_freeze(rng):
    target, _ = scene_latent(rng)
    field = WobblyPointMass(target.data, 0.2)
    cfg = SamplerConfig(n_steps=200, t_stop=150, guidance=GuidanceSpec(1, 1, 1))
    trace = []
    generate(field, None, cfg, target.data.shape, trace=trace)
    dest = [r for r in trace if r.destination]
    assert len(dest) == 51
    assert [r.step for r in dest] == list(range(200, 149, -1))
    for r in dest:
        d, m = r.rays_dest[:, :3], r.rays_dest[:, 3:]
        assert np.abs(np.linalg.norm(d, axis=1) - 1).max() < 1e-9
        assert np.abs((d * m).sum(axis=1)).max() < 1e-9
    frozen = [r.poses for r in trace if r.step < 150]
    assert all(p == dest[-1].poses for p in frozen)


def test_determinism(rng):
    target, _ = scene_latent(rng)
    field = WobblyPointMass(target.data, 0.1)
    cfg = SamplerConfig(n_steps=30, t_stop=20, seed=5)
    a, pa = generate(field, None, cfg, target.data.shape)
    b, pb = generate(field, None, cfg, target.data.shape)
    assert np.array_equal(a.data, b.data) and pa == pb
    c, _ = generate(field, None, SamplerConfig(n_steps=30, t_stop=20, seed=6), target.data.shape)
    assert not np.array_equal(a.data, c.data)


def test_guidance_swap_schedule(rng):
    target, _ = scene_latent(rng)
    field = WobblyPointMass(target.data, 0.05)
    external = ConstantField(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 4)))
    cfg = SamplerConfig(n_steps=30, t_stop=20, swap_enabled=True, swap_period=3)
    trace = []
    generate(field, None, cfg, target.data.shape, external=external, trace=trace)
    swapped = [r.step for r in trace if r.swap]
    assert swapped == [i for i in range(30, 20, -1) if (30 - i) % 3 == 0]
    assert all(0 <= r.swap_view < 4 for r in trace if r.swap)
    with pytest.raises(ValueError):
        generate(field, None, cfg, target.data.shape)


def test_trace_json_has_no_arrays(rng):
    target, _ = scene_latent(rng)
    trace = []
    generate(PointMassField(target.data), None, SamplerConfig(n_steps=3, t_stop=2), target.data.shape, trace=trace)
    rec = json.loads(trace[0].to_json())
    assert rec["step"] == 3 and rec["destination"] and "rays_dest" not in rec


def test_ray_failure_reports_step(rng):
    target, _ = scene_latent(rng)
    bad = target.data.copy()
    bad[:, 6:9] = np.array([0, 0, 1.0])[None, :, None, None]
    bad[:, 9:] = 0
    with pytest.raises(SamplingError) as err:
        generate(PointMassField(bad), None, SamplerConfig(n_steps=5, t_stop=3), bad.shape)
    assert err.value.step == 5


def test_resample_endpoints(rng):
    target, _ = scene_latent(rng)
    field = WobblyPointMass(target.data, 0.1)
    cfg = SamplerConfig(n_steps=20, t_stop=10, seed=3)
    same, _ = resample_from(field, target.data, None, cfg, 0.0)
    assert np.array_equal(same.data, target.data)
    full, pf = resample_from(field, target.data, None, cfg, 1.0)
    gen, pg = generate(field, None, cfg, target.data.shape)
    assert np.array_equal(full.data, gen.data) and pf == pg


def test_inpaint_keeps_known_entries(rng):
    target, _ = scene_latent(rng)
    known = JointLatent(rng.normal(size=target.data.shape))
    known.data[:, 6:] = target.data[:, 6:]
    m = (rng.random(known.data.shape) < 0.4).astype(float)
    out, _ = inpaint(WobblyPointMass(target.data, 0.1), known, LatentMask(m), None,
                     SamplerConfig(n_steps=10, t_stop=5))
    assert np.array_equal(out.data[m == 1], known.data[m == 1])
