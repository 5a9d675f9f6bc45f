import numpy as np
import pytest

from raysplat.gsplat.cloud import GaussianCloud, load_ply, save_ply
from raysplat.gsplat.decoder import (
    DecoderModel,
    DecoderSample,
    DecoderTrace,
    DecoderTrainConfig,
    _step_grads,
    adaptive_weight,
    decode_gaussians,
    decoder_loss,
    gradient_loss,
    load_decoder,
    save_decoder,
    ssim_loss,
    train_decoder,
    validation_psnr,
)
from raysplat.gsplat.render import render, render_backward, render_depth, render_oracle
from raysplat.harness.scenes import SceneConfig, generate_scene
from raysplat.latent import JointLatent
from raysplat.rays import CameraIntrinsics, CameraPose

from conftest import random_camera, random_cloud

AXIS_CAMERA = CameraPose(CameraIntrinsics.from_fov(60.0), np.eye(3), np.zeros(3))


def test_rasterizer_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cloud, pose = random_cloud(rng, int(rng.integers(1, 11))), random_camera(rng)
        img, alpha = render(cloud, pose, 16, 16)
        ref, ref_alpha = render_oracle(cloud, pose, 16, 16)
        assert np.abs(img - ref).max() <= 1e-5
        assert np.abs(alpha - ref_alpha).max() <= 1e-5


def test_empty_cloud():
    img, alpha = render(GaussianCloud.empty(), AXIS_CAMERA, 8, 8)
    assert not img.any() and not alpha.any()
    assert np.all(render_depth(GaussianCloud.empty(), AXIS_CAMERA, 8, 8, far=12.0) == 12.0)


def test_single_gaussian_on_axis():
    cloud = GaussianCloud([[0, 0, 3.0]], [0.999], [0.2], None, [[1.0, 1.0, 1.0]])
    img, alpha = render(cloud, AXIS_CAMERA, 17, 17)
    assert np.unravel_index(img[..., 0].argmax(), (17, 17)) == (8, 8)
    # the principal pixel sits exactly on the mean: full opacity times color
    assert img[8, 8, 0] == pytest.approx(0.999, abs=1e-12)
    assert np.allclose(img, img[::-1, ::-1])


def test_behind_camera_is_culled():
    cloud = GaussianCloud([[0, 0, -3.0]], [0.9], [0.2])
    img, _ = render(cloud, AXIS_CAMERA, 8, 8)
    assert not img.any()


def test_depth_render_of_opaque_plane():
    cloud = GaussianCloud([[0, 0, 4.0]], [0.99], [[5.0, 5.0, 0.01]])
    d = render_depth(cloud, AXIS_CAMERA, 8, 8, far=12.0)
    assert np.all(d > 4.0) and np.all(d < 12.0)


def test_render_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    cloud, pose = random_cloud(rng, 6), random_camera(rng)
    dC = rng.normal(size=(16, 16, 3))
    _, _, proj = render(cloud, pose, 16, 16, return_projection=True)
    g_color, g_alpha, _, _ = render_backward(cloud, proj, dC)

    def loss(c):
        return float((render(c, pose, 16, 16)[0] * dC).sum())

    eps = 1e-6
    for i in range(len(cloud)):
        for which, grad in (("alpha", g_alpha[i]), ("color", g_color[i, 1])):
            plus, minus = cloud.subset(np.arange(len(cloud))), cloud.subset(np.arange(len(cloud)))
            if which == "alpha":
                plus.alpha[i] += eps
                minus.alpha[i] -= eps
            else:
                plus.color[i, 1] += eps
                minus.color[i, 1] -= eps
            fd = (loss(plus) - loss(minus)) / (2 * eps)
            assert fd == pytest.approx(grad, rel=1e-5, abs=1e-8)


def test_ply_round_trip(tmp_path):
    cloud = random_cloud(np.random.default_rng(3), 5)
    save_ply(tmp_path / "c.ply", cloud)
    back = load_ply(tmp_path / "c.ply")
    assert np.allclose(back.mu, cloud.mu, atol=1e-6) and np.allclose(back.color, cloud.color, atol=1e-6)


def test_adaptive_weight():
    assert adaptive_weight(1.0, 1.0) == pytest.approx(0.1)
    assert adaptive_weight(2.0, 1.0) == pytest.approx(0.2)
    assert adaptive_weight(3.0, 0.0) == 0.0
    assert adaptive_weight(0.7, 0.3) == pytest.approx(adaptive_weight(7.0, 3.0))
    with pytest.raises(ValueError):
        adaptive_weight(-1.0, 1.0)


def test_loss_examples():
    rng = np.random.default_rng(4)
    target = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    assert decoder_loss(target, target) == pytest.approx(0.0, abs=1e-12)
    shifted = target + 0.1
    assert decoder_loss(shifted, target) == pytest.approx(0.01 + 0.05 * ssim_loss(shifted, target))
    assert decoder_loss(shifted, target, aux_enabled=True) == pytest.approx(
        decoder_loss(shifted, target) + 0.1 * gradient_loss(shifted, target))


@pytest.mark.parametrize("fn", [ssim_loss, gradient_loss])
def test_image_loss_gradients(fn):
    rng = np.random.default_rng(5)
    x, y = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    _, g = fn(x, y, with_grad=True)
    eps = 1e-6
    for idx in [(5, 6, 1), (0, 0, 0), (11, 3, 2)]:
        e = np.zeros_like(x)
        e[idx] = eps
        fd = (fn(x + e, y) - fn(x - e, y)) / (2 * eps)
        assert fd == pytest.approx(g[idx], rel=1e-5, abs=1e-10)


@pytest.fixture(scope="module")
def small_sample():
    s = generate_scene(3, SceneConfig(views=3, image_size=16, novel_views=1))
    return DecoderSample(s.latent(), s.poses, s.poses + s.novel_poses,
                         np.concatenate([s.images, s.novel_images]))


def test_zero_model_places_gaussians_on_pixel_rays(small_sample):
    m = DecoderModel(hidden=4, params=np.zeros(DecoderModel(hidden=4).size))
    cloud = decode_gaussians(m, small_sample.joint, small_sample.poses)
    assert len(cloud) == 3 * 16 * 16
    cloud.check()
    for k, pose in enumerate(small_sample.poses):
        part = cloud.mu[k * 256 : (k + 1) * 256]
        xc = pose.world_to_camera(part)
        assert np.allclose(np.linalg.norm(part - pose.center, axis=1), 6.0)
        fx, fy, cx, cy = pose.intrinsics.to_pixels(16, 16)
        u = fx * xc[:, 0] / xc[:, 2] + cx
        v = fy * xc[:, 1] / xc[:, 2] + cy
        gv, gu = np.mgrid[0:16, 0:16]
        assert np.abs(u - gu.ravel()).max() < 1e-6 and np.abs(v - gv.ravel()).max() < 1e-6


def test_decoder_pose_count_checked(small_sample):
    with pytest.raises(ValueError):
        decode_gaussians(DecoderModel(hidden=4), small_sample.joint, small_sample.poses[:2])


def test_decoder_is_local_without_pooling(small_sample):
    m = DecoderModel(hidden=4, pooled=False, rng=np.random.default_rng(0))
    base = decode_gaussians(m, small_sample.joint, small_sample.poses)
    joint = small_sample.joint.copy()
    joint.data[1, :6, 0, 1] += 0.5
    moved = decode_gaussians(m, joint, small_sample.poses)
    changed = np.flatnonzero(np.any(base.mu != moved.mu, axis=1) | np.any(base.color != moved.color, axis=1))
    rows, cols = np.divmod(changed - 256, 16)
    assert changed.size == 64
    assert np.all((rows < 8) & (cols >= 8) & (cols < 16))


def test_depth_ablation_ignores_depth_latents(small_sample):
    m = DecoderModel(hidden=4, use_depth=False, rng=np.random.default_rng(0))
    joint = small_sample.joint.copy()
    joint.data[:, 3:6] = np.random.default_rng(1).normal(size=joint.data[:, 3:6].shape)
    a = decode_gaussians(m, small_sample.joint, small_sample.poses)
    b = decode_gaussians(m, joint, small_sample.poses)
    assert np.array_equal(a.mu, b.mu)


def test_decoder_gradient_matches_finite_differences(small_sample):
    rng = np.random.default_rng(0)
    m = DecoderModel(hidden=6, rng=rng)
    m.params += rng.normal(0, 0.1, m.size)
    _, _, g, _ = _step_grads(m, small_sample, [0, 3], False, gradient_loss)

    def loss(p):
        mm = m.copy()
        mm.params = p
        return _step_grads(mm, small_sample, [0, 3], False, gradient_loss)[0]

    # small steps: the loss jumps where a pixel crosses a Gaussian's 3-sigma cutoff
    eps = 1e-7
    for _ in range(6):
        u = rng.normal(size=m.size)
        fd = (loss(m.params + eps * u) - loss(m.params - eps * u)) / (2 * eps)
        assert fd == pytest.approx(g @ u, rel=1e-4)


def test_aux_schedule(small_sample):
    trace = DecoderTrace()
    train_decoder(DecoderModel(hidden=4), [small_sample],
                  DecoderTrainConfig(steps=8, aux_threshold=0.5, scenes_per_step=1), trace=trace)
    assert trace.activation_step == 4
    assert [r.aux_active for r in trace.records] == [False] * 4 + [True] * 4
    assert all(r.w3 > 0 for r in trace.records[4:])


def test_aux_threshold_one_never_activates(small_sample):
    def forbidden(*a, **k):
        raise AssertionError("aux loss evaluated")

    cfg = DecoderTrainConfig(steps=4, aux_threshold=1.0, scenes_per_step=1)
    trace = DecoderTrace()
    a = train_decoder(DecoderModel(hidden=4), [small_sample], cfg, aux_fn=forbidden, trace=trace)
    b = train_decoder(DecoderModel(hidden=4), [small_sample], cfg)
    assert trace.activation_step is None
    assert np.array_equal(a.params, b.params)


def test_training_improves_fit(small_sample):
    m = DecoderModel(hidden=8, rng=np.random.default_rng(0))
    before = validation_psnr(m, [small_sample])
    m2 = train_decoder(m, [small_sample], DecoderTrainConfig(steps=30, scenes_per_step=1, aux_threshold=1.0))
    assert validation_psnr(m2, [small_sample]) > before


def test_decoder_file_round_trip(tmp_path):
    m = DecoderModel(hidden=5, use_depth=False, rng=np.random.default_rng(2))
    save_decoder(tmp_path / "d.npz", m)
    back = load_decoder(tmp_path / "d.npz")
    assert back.config == m.config and np.array_equal(back.params, m.params)
    with pytest.raises(ValueError):
        DecoderModel(hidden=5, params=np.zeros(3))
