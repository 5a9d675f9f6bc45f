"""Experiment drivers: train or load models, run a task over held-out scenes, write a report.

Every experiment writes ``report.json`` (schema ``SCHEMA_VERSION``, no timings),
``timings.json`` and PNG grids under ``grids/``.  Trained models are cached
under ``cache_dir`` keyed by a hash of everything that determines them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..gsplat.decoder import (
    DecoderModel,
    DecoderSample,
    DecoderTrace,
    DecoderTrainConfig,
    render_views,
    train_decoder,
    validation_psnr,
)
from ..inpaint import edit_object_task, edit_stroke_task, estimate_poses_task, novel_view_task
from ..latent import decode_depth, decode_image, encode_image
from ..nets import build_model
from ..rays import PluckerRayGrid, RayRecoveryError
from ..rf_core import TrainConfig, load_checkpoint, save_checkpoint, train_velocity
from ..sampler import SamplerConfig, SamplingError, generate
from .dataset import write_png
from .metrics import (
    center_errors,
    eval_nvs,
    eval_pose_accuracy,
    psnr,
    random_pose_baseline,
    relative_to_metric_depth,
    umeyama,
)
from .scenes import PALETTE, PALETTE_NAMES, SceneConfig, build_dataset, condition_for, generate_scene, object_pixel_masks

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPERIMENTS = ("gen", "pose", "nvs-interp", "nvs-extrap", "edit", "decoder-ablation")

PAPER_SAMPLER = {"n_steps": 200, "t_stop": 150, "guidance": {"image": 7.0, "depth": 5.0, "ray": 1.0}}
# tuned for the toy model: poses keep updating until t = 0.2
POSE_SAMPLER = {"n_steps": 200, "t_stop": 40, "guidance": {"image": 1.0, "depth": 1.0, "ray": 1.0}}
NVS_SAMPLER = {"n_steps": 100, "t_stop": 100, "guidance": {"image": 1.0, "depth": 1.0, "ray": 1.0}}


@dataclass
class ExperimentConfig:
    seed: int = 0
    train_seeds: tuple = (0, 1600)
    heldout_seeds: tuple = (1600, 2000)
    eval_scenes: int = 50
    image_size: int = 64
    # velocity model
    checkpoint: str | None = None
    rf_hidden: int = 256
    rf_freqs: int = 4
    rf_steps: int = 20000
    rf_batch: int = 32
    rf_lr: float = 1e-3
    # tasks
    pose_sampler: dict = field(default_factory=lambda: dict(POSE_SAMPLER))
    baseline_trials: int = 20
    nvs_sampler: dict = field(default_factory=lambda: dict(NVS_SAMPLER))
    nvs_views: tuple = (2, 4, 6)
    nvs_seeds: int = 3
    gen_sampler: dict = field(default_factory=lambda: dict(PAPER_SAMPLER))
    gen_samples: int = 4
    edit_sampler: dict = field(default_factory=lambda: dict(PAPER_SAMPLER))
    edit_scenes: int = 4
    # decoder ablation
    decoder_train_scenes: int = 40
    decoder_val_scenes: int = 10
    decoder_steps: int = 200
    decoder_lr: float = 1e-3
    decoder_seeds: int = 3
    aux_threshold: float = 0.5

    def __post_init__(self):
        self.train_seeds = tuple(int(s) for s in self.train_seeds)
        self.heldout_seeds = tuple(int(s) for s in self.heldout_seeds)
        self.nvs_views = tuple(int(n) for n in self.nvs_views)
        for name in ("train_seeds", "heldout_seeds"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi:
                raise ValueError(f"{name} must be a non-empty [start, stop) range")
        a, b = self.train_seeds, self.heldout_seeds
        if a[0] < b[1] and b[0] < a[1]:
            raise ValueError("training and held-out seed ranges overlap")
        if self.eval_scenes < 1 or self.eval_scenes > b[1] - b[0]:
            raise ValueError("eval_scenes must be between 1 and the held-out range size")
        for k in ("rf_steps", "rf_batch", "decoder_steps", "nvs_seeds", "decoder_seeds", "baseline_trials"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be at least 1")
        if any(not 1 <= n < 8 for n in self.nvs_views):
            raise ValueError("nvs_views entries must lie in [1, 7]")
        for k in ("pose_sampler", "nvs_sampler", "gen_sampler", "edit_sampler"):
            # validated and stored in full so reports show every sampler setting
            setattr(self, k, SamplerConfig.from_dict(getattr(self, k)).to_dict())

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for k in ("train_seeds", "heldout_seeds", "nvs_views"):
            d[k] = list(d[k])
        return d

    def sampler(self, key) -> SamplerConfig:
        return SamplerConfig.from_dict(getattr(self, key))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _rf_arch(config: ExperimentConfig):
    from .scenes import COND_DIM

    h = config.image_size // 8
    return {"kind": "mlp", "channels": 12, "h": h, "w": h, "hidden": config.rf_hidden,
            "freqs": config.rf_freqs, "cond_dim": COND_DIM, "dtype": "float32"}


def velocity_model(config: ExperimentConfig, cache_dir, train=True):
    """Loads the explicit checkpoint, else the cached one, else trains and caches."""
    if config.checkpoint is not None:
        path = Path(config.checkpoint)
        if not path.is_file():
            raise FileNotFoundError(
                f"checkpoint {path} not found; create it with `raysplat train rf` "
                "or leave `checkpoint` unset to train into the cache"
            )
        return load_checkpoint(path)
    key = {"arch": _rf_arch(config), "seeds": config.train_seeds, "size": config.image_size,
           "steps": config.rf_steps, "batch": config.rf_batch, "lr": config.rf_lr, "seed": config.seed}
    path = Path(cache_dir) / f"rf_{_digest(key)}.sfrf"
    if path.is_file():
        return load_checkpoint(path)
    if not train:
        raise FileNotFoundError(f"no cached velocity model at {path}; run `raysplat train rf` first")
    lat, conds, _ = build_dataset(range(*config.train_seeds), SceneConfig(image_size=config.image_size, novel_views=0))
    model = build_model(_rf_arch(config), rng=np.random.default_rng(config.seed))
    model = train_velocity(model, lat, conds,
                           TrainConfig(steps=config.rf_steps, batch_size=config.rf_batch, lr=config.rf_lr, log_every=0),
                           np.random.default_rng(config.seed + 1))
    model.seed = config.seed
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model)
    # reload so fresh and cached runs see identical (float32-stored) parameters
    return load_checkpoint(path)


def heldout_scenes(config: ExperimentConfig, count=None, novel_views=0):
    lo = config.heldout_seeds[0]
    count = config.eval_scenes if count is None else count
    cfg = SceneConfig(image_size=config.image_size, novel_views=novel_views)
    return [generate_scene(s, cfg) for s in range(lo, lo + count)]


def image_grid(rows, pad=2) -> np.ndarray:
    """Stacks equally sized H x W x 3 tiles into one image with a white gutter."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            tile = np.asarray(tile, dtype=float)
            if tile.ndim == 2:
                tile = np.repeat(tile[..., None], 3, axis=2)
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y : y + h, x : x + w] = np.clip(tile, 0, 1)
    return out


def _depth_tile(d):
    d = np.asarray(d, dtype=float)
    lo, hi = d.min(), d.max()
    return (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)


def _camera_plot(gt_centers, pred_centers, size=128) -> np.ndarray:
    """Top-down (x, y) view of GT (white) and aligned predicted (red) camera centers."""
    pts = np.concatenate([gt_centers, pred_centers])[:, :2]
    lo, hi = pts.min(0), pts.max(0)
    span = max(float((hi - lo).max()), 1e-6)
    to_px = lambda p: tuple(8 + (size - 16) * (p[:2] - lo) / span)  # noqa: E731
    im = Image.new("RGB", (size, size))
    draw = ImageDraw.Draw(im)
    for g, p in zip(gt_centers, pred_centers):
        draw.line([to_px(g), to_px(p)], fill=(90, 90, 90))
        x, y = to_px(g)
        draw.ellipse([x - 3, y - 3, x + 3, y + 3], outline=(255, 255, 255))
        x, y = to_px(p)
        draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=(230, 40, 40))
    return np.asarray(im, dtype=float) / 255


# -- experiments ------------------------------------------------------------------


def _exp_gen(config, model, out, timings):
    cfg = config.sampler("gen_sampler")
    scenes = heldout_scenes(config, config.gen_samples)
    h = config.image_size // 8
    rows, grid = [], []
    for i, scene in enumerate(scenes):
        joint, poses = generate(model, scene.condition, cfg, (8, 12, h, h), rng=np.random.default_rng([config.seed, i]))
        rays = [PluckerRayGrid.from_channels(c) for c in joint.ray]
        unit = max(float(np.abs(np.linalg.norm(r.d, axis=-1) - 1).max()) for r in rays)
        ortho = max(float(np.abs((r.d * r.m).sum(-1)).max()) for r in rays)
        steps = [float(np.degrees(np.arccos(np.clip((np.trace(b.R @ a.R.T) - 1) / 2, -1, 1))))
                 for a, b in zip(poses[:-1], poses[1:])]
        rows.append({"scene": scene.seed, "condition": scene.dominant, "kind": scene.kind,
                     "ray_unit_residual": unit, "ray_orthogonality_residual": ortho,
                     "mean_view_step_deg": float(np.mean(steps))})
        grid.append([decode_image(v) for v in joint.image])
        grid.append([_depth_tile(decode_depth(v)) for v in joint.depth])
    write_png(out / "grids" / "samples.png", image_grid(grid))
    return {"sampler": cfg.to_dict(), "rows": rows}


def _exp_pose(config, model, out, timings):
    cfg = config.sampler("pose_sampler")
    scenes = heldout_scenes(config)
    baseline = random_pose_baseline(scenes, np.random.default_rng([config.seed, 99]), config.baseline_trials)
    rows = [dict(method="random", depth=None, **baseline)]
    plots = []
    for with_depth in (True, False):
        t0 = time.perf_counter()
        acc = []
        for j, s in enumerate(scenes):
            rng = np.random.default_rng([config.seed, s.seed])
            try:
                pred = estimate_poses_task(s.images, model, cfg, rng=rng, depths=s.depths if with_depth else None)
                acc.append(eval_pose_accuracy(pred, s.poses, s.scale))
            except (SamplingError, RayRecoveryError) as exc:
                log.warning("pose estimation failed on scene %d: %s", s.seed, exc)
                acc.append({k: 0.0 for k in baseline})
                pred = None
            if pred is not None and j < 4:
                gt = np.stack([p.center for p in s.poses])
                pc = np.stack([p.center for p in pred])
                sc, R, t = umeyama(pc, gt)
                plots.append(_camera_plot(gt, sc * pc @ R.T + t))
        timings[f"pose_depth_{with_depth}"] = time.perf_counter() - t0
        mean = {k: float(np.mean([a[k] for a in acc])) for k in baseline}
        rows.append(dict(method="inpaint", depth=with_depth, **mean))
    if plots:
        write_png(out / "grids" / "cameras.png", image_grid([plots]))
    return {"sampler": cfg.to_dict(), "scenes": len(scenes), "rows": rows}


def _known_views(mode, n):
    if mode == "interp":
        return [int(k) for k in np.unique(np.round(np.linspace(0, 7, n)).astype(int))]
    return list(range(n))


def _exp_nvs(config, model, out, timings, mode):
    cfg = config.sampler("nvs_sampler")
    scenes = heldout_scenes(config)
    rows, grid = [], []
    for n in config.nvs_views:
        known = _known_views(mode, n)
        targets = [k for k in range(8) if k not in known]
        per_seed = []
        for seed in range(config.nvs_seeds):
            metrics = []
            for s in scenes:
                kv = {k: (s.images[k], s.depths[k]) for k in known}
                frames, rel, _ = novel_view_task(kv, s.poses, model, cfg,
                                                 rng=np.random.default_rng([config.seed, seed, s.seed]),
                                                 cond=s.condition)
                metrics.append(eval_nvs(frames[targets], s.images[targets],
                                        relative_to_metric_depth(rel[targets]), s.depths[targets]))
                if seed == 0 and s is scenes[0]:
                    grid.append([frames[k] if k in targets else s.images[k] * 0.4 for k in range(8)])
            per_seed.append({k: float(np.mean([m[k] for m in metrics])) for k in metrics[0]})
        row = {"views": n, "known": known, "per_seed_psnr": [p["psnr"] for p in per_seed]}
        row.update({k: float(np.mean([p[k] for p in per_seed])) for k in per_seed[0]})
        rows.append(row)
    grid.append(list(scenes[0].images))
    write_png(out / "grids" / f"nvs_{mode}.png", image_grid(grid))
    return {"sampler": cfg.to_dict(), "mode": mode, "scenes": len(scenes), "rows": rows}


def _paint_stroke(frames, color, rng):
    """A filled rectangle of ``color`` at the same random spot in every frame."""
    out = np.array(frames, dtype=float)
    H = out.shape[1]
    y, x = rng.integers(H // 4, H // 2, size=2)
    out[:, y : y + H // 4, x : x + H // 4] = color
    return out


def _exp_edit(config, model, out, timings):
    cfg = config.sampler("edit_sampler")
    cands = heldout_scenes(config, min(config.heldout_seeds[1] - config.heldout_seeds[0], 4 * config.edit_scenes))
    scenes = [s for s in cands if s.kind == "object"][: config.edit_scenes]
    rows, grid = [], []
    for i, s in enumerate(scenes):
        rng = np.random.default_rng([config.seed, s.seed])
        new = PALETTE_NAMES[(PALETTE_NAMES.index(s.dominant) + 3) % len(PALETTE_NAMES)]
        count = int(round(s.condition.descriptor[len(PALETTE) + 1] * 20))
        cond = condition_for(new, s.kind, count)
        masks = object_pixel_masks(s)
        lat = s.latent()
        edited, _ = edit_object_task(lat, masks, cond, model, cfg, rng=rng)
        frames = np.stack([decode_image(v) for v in edited.image])
        before = np.stack([decode_image(v) for v in lat.image])
        target = np.array(PALETTE[new])
        inside = masks.astype(bool)
        dist_before = np.linalg.norm(before - target, axis=-1)[inside].mean() if inside.any() else 0.0
        dist_after = np.linalg.norm(frames - target, axis=-1)[inside].mean() if inside.any() else 0.0
        keep = np.ones(lat.data.shape, dtype=bool)
        grid_mask = np.stack([m.reshape(lat.data.shape[2], 8, lat.data.shape[3], 8).mean((1, 3)) >= 0.5
                              for m in masks])
        keep[:, :6] = ~grid_mask[:, None]
        preserved = float(np.abs(edited.data - lat.data)[keep].max())
        stroked = _paint_stroke(s.images, target, rng)
        st, _ = edit_stroke_task(stroked, cond, model, cfg, rng=rng, depths=s.depths, poses=s.poses)
        st_frames = np.stack([decode_image(v) for v in st.image])
        st_latent_frames = np.stack([decode_image(encode_image(f)) for f in stroked])
        rows.append({
            "scene": s.seed, "from": s.dominant, "to": new,
            "object_color_distance_before": float(dist_before),
            "object_color_distance_after": float(dist_after),
            "outside_mask_max_change": preserved,
            "stroke_psnr_to_input": float(np.mean([psnr(a, b) for a, b in zip(st_frames, st_latent_frames)])),
        })
        if i < 2:
            grid += [list(before), list(frames), list(stroked), list(st_frames)]
    if grid:
        write_png(out / "grids" / "edits.png", image_grid(grid))
    return {"sampler": cfg.to_dict(), "rows": rows}


def _decoder_samples(config, seeds):
    cfg = SceneConfig(image_size=config.image_size, novel_views=4)
    out = []
    for seed in seeds:
        s = generate_scene(seed, cfg)
        out.append(DecoderSample(s.latent(), s.poses, s.novel_poses, s.novel_images))
    return out


def ablation_decoders(config, samples, seed, trace_with=None, trace_without=None):
    """(initial, trained) decoder pairs with and without the depth group, same seed."""
    tcfg = DecoderTrainConfig(steps=config.decoder_steps, lr=config.decoder_lr, seed=seed,
                              aux_threshold=config.aux_threshold)
    out = {}
    for use_depth, trace in ((True, trace_with), (False, trace_without)):
        init = DecoderModel(use_depth=use_depth, rng=np.random.default_rng(seed))
        out[use_depth] = (init, train_decoder(init, samples, tcfg, trace=trace))
    return out


def _exp_decoder(config, model, out, timings):
    lo = config.train_seeds[0]
    train = _decoder_samples(config, range(lo, lo + config.decoder_train_scenes))
    hl = config.heldout_seeds[0]
    val = _decoder_samples(config, range(hl, hl + config.decoder_val_scenes))
    rows = []
    expected = int(np.ceil(config.aux_threshold * config.decoder_steps))
    for seed in range(config.decoder_seeds):
        row = {"seed": seed}
        traces = {True: DecoderTrace(), False: DecoderTrace()}
        t0 = time.perf_counter()
        models = ablation_decoders(config, train, seed, traces[True], traces[False])
        timings[f"decoder_seed{seed}"] = time.perf_counter() - t0
        for use_depth, (init, trained) in models.items():
            tag = "with_depth" if use_depth else "without_depth"
            row[f"{tag}_init_psnr"] = validation_psnr(init, val)
            row[f"{tag}_psnr"] = validation_psnr(trained, val)
            row[f"{tag}_aux_step"] = traces[use_depth].activation_step
        rows.append(row)
        if seed == 0:
            s = val[0]
            grid = [list(s.target_images)]
            for use_depth in (True, False):
                imgs = render_views(models[use_depth][1], s.joint, s.poses, s.target_poses, config.image_size)
                grid.append(list(np.clip(imgs, 0, 1)))
            write_png(out / "grids" / "decoder.png", image_grid(grid))
    return {"aux_expected_step": expected, "rows": rows}


_RUNNERS = {
    "gen": _exp_gen,
    "pose": _exp_pose,
    "nvs-interp": lambda c, m, o, t: _exp_nvs(c, m, o, t, "interp"),
    "nvs-extrap": lambda c, m, o, t: _exp_nvs(c, m, o, t, "extrap"),
    "edit": _exp_edit,
    "decoder-ablation": _exp_decoder,
}


def run_experiment(name, config: ExperimentConfig | None = None, out_dir="outputs", cache_dir=None,
                   train=True) -> dict:
    """Runs one named experiment; returns the report dict that was written."""
    if name not in _RUNNERS:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    config = config or ExperimentConfig()
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir is not None else out / "cache"
    timings = {}
    t0 = time.perf_counter()
    model = None
    if name != "decoder-ablation":
        model = velocity_model(config, cache_dir, train=train)
        timings["model"] = time.perf_counter() - t0
    result = _RUNNERS[name](config, model, out, timings)
    timings["total"] = time.perf_counter() - t0
    report = {"schema_version": SCHEMA_VERSION, "experiment": name, "config": config.to_dict(), **result}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    with open(out / "timings.json", "w") as fh:
        json.dump(timings, fh, indent=1, sort_keys=True)
    return report
