import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raysplat.latent import (
    JointLatent,
    LatentMask,
    SceneCondition,
    assemble,
    decode_depth,
    decode_image,
    encode_depth,
    encode_image,
    load_latent,
    merge_masked,
    save_latent,
    split,
)
from raysplat.rays import pose_to_rays

from conftest import random_pose_set


def test_constant_images():
    assert np.array_equal(encode_image(np.ones((16, 16, 3))), np.ones((3, 2, 2)))
    assert np.array_equal(encode_image(np.full((16, 16, 3), 0.5)), np.zeros((3, 2, 2)))


def test_checkerboard_tiles(rng):
    colors = rng.random((2, 3, 3))
    img = np.kron(colors, np.ones((8, 8, 1)))
    assert img.shape == (16, 24, 3)
    lat = encode_image(img)
    assert np.allclose(lat, (2 * colors - 1).transpose(2, 0, 1))


def test_image_shape_errors():
    with pytest.raises(ValueError):
        encode_image(np.zeros((16, 16)))
    with pytest.raises(ValueError):
        encode_image(np.zeros((12, 16, 3)))


def test_decode_image():
    assert np.array_equal(decode_image(np.zeros((3, 2, 2))), np.full((16, 16, 3), 0.5))
    assert decode_image(np.full((3, 1, 1), 3.0)).max() == 1.0


def test_depth_ramp_and_constant():
    ramp = np.tile(np.arange(1.0, 17.0), (16, 1))
    lat = encode_depth(ramp)
    assert lat.shape == (3, 2, 2)
    # tile means of the normalized ramp: columns 0-7 and 8-15
    col = 2 * (np.arange(16) / 15) - 1
    expect = np.array([col[:8].mean(), col[8:].mean()])
    assert np.allclose(lat[0], np.tile(expect, (2, 1)))
    assert np.array_equal(encode_depth(np.full((8, 8), 4.0)), np.zeros((3, 1, 1)))
    with pytest.raises(ValueError):
        encode_depth(np.zeros((8, 8)))


def test_decode_depth_upsamples():
    d = decode_depth(np.arange(12.0).reshape(3, 2, 2))
    assert d.shape == (16, 16) and d[0, 0] == 4.0


def test_assemble_layout(rng):
    poses = random_pose_set(rng, 2)
    imgs = [encode_image(rng.random((16, 16, 3))) for _ in poses]
    deps = [encode_depth(rng.random((16, 16)) + 1) for _ in poses]
    rays = [pose_to_rays(p, 2, 2) for p in poses]
    j = assemble(imgs, deps, rays)
    assert j.data.shape == (2, 12, 2, 2) and j.n == 3
    im, de, ra = split(j)
    assert np.array_equal(im[1], imgs[1]) and np.array_equal(de[0], deps[0])
    assert np.array_equal(ra[1], rays[1].to_channels())
    with pytest.raises(ValueError):
        assemble(imgs, deps[:1], rays)
    with pytest.raises(ValueError):
        JointLatent(np.zeros((2, 11, 2, 2)))


def test_mask_from_groups():
    m = LatentMask.from_groups(3, 3, 2, 2, {"image": [0, 2], "ray": [1]})
    assert m.mask[0, :3].all() and not m.mask[0, 3:].any()
    assert m.mask[1, 6:].all() and not m.mask[1, :6].any()
    with pytest.raises(ValueError):
        LatentMask(np.full((1, 12, 1, 1), 0.5))


def test_merge_extremes(rng):
    k, u = rng.normal(size=(2, 2, 12, 2, 2))
    assert np.array_equal(merge_masked(k, u, np.ones_like(k)), k)
    assert np.array_equal(merge_masked(k, u, np.zeros_like(k)), u)
    with pytest.raises(ValueError):
        merge_masked(k, u, np.full_like(k, 0.3))
    with pytest.raises(ValueError):
        merge_masked(k, u[:1], np.ones_like(k))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_merge_matches_scalar_loop(seed):
    r = np.random.default_rng(seed)
    k, u = r.normal(size=(2, 2, 12, 2, 2))
    m = (r.random(k.shape) < 0.5).astype(float)
    out = merge_masked(JointLatent(k), JointLatent(u), LatentMask(m)).data
    for idx in np.ndindex(k.shape):
        assert out[idx] == (k[idx] if m[idx] == 1 else u[idx])


def test_condition_rules():
    with pytest.raises(ValueError):
        SceneCondition(np.array([np.nan]))
    with pytest.raises(ValueError):
        SceneCondition(np.ones(2), null=True)
    assert SceneCondition.null_like(4) == SceneCondition(np.zeros(4), True)


def test_latent_archive_round_trip(tmp_path, rng):
    poses = random_pose_set(rng, 2)
    j = JointLatent(rng.normal(size=(2, 12, 2, 2)).astype(np.float32))
    cond = SceneCondition(rng.normal(size=5))
    save_latent(tmp_path / "x.sflt", j, poses, cond)
    back, bp, bc = load_latent(tmp_path / "x.sflt")
    assert np.array_equal(back.data, j.data)
    assert bp == poses and bc == cond
    (tmp_path / "bad.sflt").write_bytes(b"SFLX")
    with pytest.raises(ValueError):
        load_latent(tmp_path / "bad.sflt")
