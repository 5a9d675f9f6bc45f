"""Command-line entry point: ``raysplat <command> ...``.

Every command writes its artifacts under ``--out`` (default ``$RAYSPLAT_OUTPUT``
or ``outputs``) together with ``manifest.json``: arguments, seed, versions and
sha256 digests of inputs and outputs.  Nothing time-dependent goes into the
manifest, so a rerun with the same arguments reproduces it byte for byte.

Exit codes: 0 success, 2 invalid configuration, 1 failure while running.
Errors are one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("raysplat")

MANIFEST_VERSION = 1
# arguments that do not change what is computed
_UNRECORDED = {"out", "config", "threads", "verbose", "func", "command", "action"}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=100, max_help_position=34)


# -- small parsers ----------------------------------------------------------------


def _guidance(text):
    vals = text if isinstance(text, (list, tuple)) else str(text).split(",")
    try:
        vals = [float(v) for v in vals]
    except ValueError:
        raise argparse.ArgumentTypeError(f"guidance must be three numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"guidance needs image,depth,ray scales; got {len(vals)} values")
    return vals


def _index_list(text):
    vals = text if isinstance(text, (list, tuple)) else str(text).split(",")
    try:
        return [int(v) for v in vals]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated view indices, got {text!r}") from None


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".json":
        with open(path) as fh:
            data = json.load(fh)
    elif path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        raise ConfigError(f"config file must be .toml or .json, got {path.name}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a table of keys")
    return data


# -- hashing and manifest ---------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_path(path) -> str | None:
    path = Path(path)
    if path.is_file():
        return _sha256(path)
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(_sha256(f).encode())
        return h.hexdigest()
    return None


def _versions():
    import PIL
    import scipy

    return {"raysplat": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pillow": PIL.__version__}


def write_manifest(out: Path, args, inputs, config_data=None):
    outputs = {}
    for f in sorted(p for p in out.rglob("*") if p.is_file()):
        rel = f.relative_to(out).as_posix()
        if rel == "manifest.json" or rel == "timings.json" or rel.startswith("cache/"):
            continue
        outputs[rel] = _sha256(f)
    recorded = {k: v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED}
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": args.command,
        "arguments": recorded,
        "config_file": config_data,
        "versions": _versions(),
        "inputs": {str(p): _digest_path(p) for p in inputs if p is not None},
        "outputs": outputs,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


# -- helpers shared by commands -----------------------------------------------------


def _sampler_config(args):
    from .sampler import SamplerConfig

    g = args.guidance
    return SamplerConfig(
        n_steps=args.steps, t_stop=args.t_stop,
        guidance={"image": g[0], "depth": g[1], "ray": g[2]},
        swap_period=args.swap_period, seed=args.seed,
    )


def _require(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required")
    if not Path(path).exists():
        raise ConfigError(f"{what} path {path} does not exist")
    return Path(path)


def _condition(args):
    from .harness.scenes import PALETTE_NAMES, condition_for

    if args.dominant not in PALETTE_NAMES:
        raise ConfigError(f"unknown color {args.dominant!r}; choose from {', '.join(PALETTE_NAMES)}")
    return condition_for(args.dominant, args.kind, args.primitives)


def _write_views(out, frames, rel_depths=None, prefix=""):
    from .harness.dataset import write_png

    (out / f"{prefix}frames").mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        write_png(out / f"{prefix}frames" / f"{k:03d}.png", f)
    if rel_depths is not None:
        (out / f"{prefix}depth").mkdir(parents=True, exist_ok=True)
        for k, d in enumerate(rel_depths):
            write_png(out / f"{prefix}depth" / f"{k:03d}.png", (np.clip(d, -1, 1) + 1) / 2)


def _trace(args):
    return [] if getattr(args, "trace", False) else None


def _write_trace(out, trace):
    if trace is None:
        return
    with open(out / "trace.jsonl", "w") as fh:
        for rec in trace:
            fh.write(rec.to_json() + "\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- commands -------------------------------------------------------------------------


def cmd_dataset_gen(args, out):
    from .harness.dataset import save_scene
    from .harness.scenes import SceneConfig, generate_scene

    if args.count < 1:
        raise ConfigError("--count must be at least 1")
    if args.size % 8 or args.size < 16:
        raise ConfigError("--size must be a multiple of 8 and at least 16")
    cfg = SceneConfig(image_size=args.size, novel_views=args.novel_views)
    for seed in range(args.start, args.start + args.count):
        scene = generate_scene(seed, cfg, args.kind)
        save_scene(out / f"scene_{seed:05d}", scene)
    return []


def cmd_train_rf(args, out):
    from .harness.dataset import load_dataset
    from .harness.scenes import COND_DIM
    from .nets import build_model
    from .rf_core import TrainConfig, save_checkpoint, train_velocity

    data = _require(args.dataset, "dataset")
    for k in ("steps", "batch_size", "hidden", "freqs"):
        if getattr(args, k) < 1:
            raise ConfigError(f"--{k.replace('_', '-')} must be at least 1")
    lat, conds, _ = load_dataset(data)
    if args.image_only:
        S, K = lat.shape[:2]
        lat = lat[:, :, :3].reshape(S * K, 1, 3, *lat.shape[3:])
        conds = np.repeat(conds, K, axis=0)
    arch = {"kind": "mlp", "channels": lat.shape[2], "h": lat.shape[3], "w": lat.shape[4],
            "hidden": args.hidden, "freqs": args.freqs, "cond_dim": COND_DIM, "dtype": "float32"}
    model = build_model(arch, rng=np.random.default_rng(args.seed))
    model = train_velocity(model, lat, conds,
                           TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                                       cond_dropout=args.cond_dropout),
                           np.random.default_rng(args.seed + 1))
    model.seed = args.seed
    save_checkpoint(out / "rf.sfrf", model)
    _write_json(out / "loss.json", [float(x) for x in model.history])
    return [data]


def cmd_train_decoder(args, out):
    from .gsplat.decoder import DecoderModel, DecoderSample, DecoderTrace, DecoderTrainConfig, save_decoder, train_decoder
    from .harness.dataset import load_scene, scene_dirs

    data = _require(args.dataset, "dataset")
    if args.steps < 1:
        raise ConfigError("--steps must be at least 1")
    samples = []
    for d in scene_dirs(data):
        rec = load_scene(d)
        if rec.novel_poses is None:
            raise ConfigError(f"{d} has no novel/ views; generate the dataset with --novel-views > 0")
        samples.append(DecoderSample(rec.latent(), rec.poses, rec.novel_poses, rec.novel_images))
    model = DecoderModel(use_depth=not args.no_depth, rng=np.random.default_rng(args.seed))
    trace = DecoderTrace()
    tcfg = DecoderTrainConfig(steps=args.steps, lr=args.lr, aux_threshold=args.aux_threshold, seed=args.seed)
    model = train_decoder(model, samples, tcfg, trace=trace)
    save_decoder(out / "decoder.npz", model)
    _write_json(out / "trace.json", [vars(r) for r in trace.records])
    return [data]


def _external(args):
    from .rf_core import load_checkpoint

    if args.external is None:
        return None
    ext = load_checkpoint(_require(args.external, "external"))
    if ext.arch.get("channels") != 3:
        raise ConfigError("the external model must be a single-view image model (train rf --image-only)")
    return ext


def cmd_sample(args, out):
    from .latent import decode_depth, decode_image, save_latent
    from .rays import save_poses
    from .rf_core import load_checkpoint
    from .sampler import generate

    ckpt = _require(args.checkpoint, "checkpoint")
    cfg = _sampler_config(args)
    external = _external(args)
    cfg.swap_enabled = external is not None
    cfg.external_scale = args.external_scale
    cond = _condition(args)
    model = load_checkpoint(ckpt)
    shape = (args.views, model.arch["channels"], model.arch["h"], model.arch["w"])
    trace = _trace(args)
    joint, poses = generate(model, cond, cfg, shape, external=external, trace=trace)
    _write_trace(out, trace)
    save_latent(out / "latent.sflt", joint, poses, cond)
    save_poses(out / "poses.json", poses)
    _write_views(out, [decode_image(v) for v in joint.image], [decode_depth(v) for v in joint.depth])
    return [ckpt, args.external]


def cmd_pose_estimate(args, out):
    from .harness.dataset import load_scene, read_depths, read_frames
    from .harness.metrics import eval_pose_accuracy
    from .inpaint import estimate_poses_task
    from .rays import save_poses
    from .rf_core import load_checkpoint

    ckpt = _require(args.checkpoint, "checkpoint")
    frames = read_frames(_require(args.frames, "frames"))
    depths = read_depths(_require(args.depth, "depth")) if args.depth else None
    model = load_checkpoint(ckpt)
    trace = _trace(args)
    poses = estimate_poses_task(frames, model, _sampler_config(args), depths=depths, trace=trace)
    _write_trace(out, trace)
    save_poses(out / "poses.json", poses)
    if args.reference:
        ref = load_scene(_require(args.reference, "reference"))
        _write_json(out / "metrics.json", eval_pose_accuracy(poses, ref.poses, ref.scale))
    return [ckpt, args.frames, args.depth, args.reference]


def cmd_nvs(args, out):
    from .harness.dataset import load_scene
    from .harness.metrics import eval_nvs, relative_to_metric_depth
    from .inpaint import novel_view_task
    from .rf_core import load_checkpoint

    ckpt = _require(args.checkpoint, "checkpoint")
    scene = load_scene(_require(args.scene, "scene"))
    K = len(scene.poses)
    if not args.known or any(not 0 <= k < K for k in args.known):
        raise ConfigError(f"--known needs view indices in [0, {K - 1}]")
    model = load_checkpoint(ckpt)
    kv = {k: (scene.images[k], scene.depths[k]) for k in sorted(set(args.known))}
    trace = _trace(args)
    frames, rel, _ = novel_view_task(kv, scene.poses, model, _sampler_config(args), cond=scene.condition,
                                     trace=trace)
    _write_trace(out, trace)
    _write_views(out, frames, rel)
    targets = [k for k in range(K) if k not in kv]
    if targets:
        _write_json(out / "metrics.json", eval_nvs(frames[targets], scene.images[targets],
                                                   relative_to_metric_depth(rel[targets]), scene.depths[targets]))
    return [ckpt, args.scene]


def cmd_edit_object(args, out):
    from .harness.dataset import load_scene, read_frames
    from .inpaint import edit_object_task
    from .latent import decode_depth, decode_image, save_latent
    from .rf_core import load_checkpoint

    ckpt = _require(args.checkpoint, "checkpoint")
    scene_dir = _require(args.scene, "scene")
    mask_dir = Path(args.masks) if args.masks else scene_dir / "masks"
    if not mask_dir.is_dir():
        raise ConfigError(f"no object masks at {mask_dir}; pass --masks")
    if not 0 < args.t_inv <= 1:
        raise ConfigError("--t-inv must lie in (0, 1]")
    scene = load_scene(scene_dir)
    masks = read_frames(mask_dir)[..., 0] > 0.5
    cond = _condition(args)
    model = load_checkpoint(ckpt)
    trace = _trace(args)
    joint, poses = edit_object_task(scene.latent(), masks, cond, model, _sampler_config(args), t_inv=args.t_inv,
                                    trace=trace)
    _write_trace(out, trace)
    save_latent(out / "latent.sflt", joint, poses, cond)
    _write_views(out, [decode_image(v) for v in joint.image], [decode_depth(v) for v in joint.depth])
    return [ckpt, scene_dir, mask_dir]


def cmd_edit_stroke(args, out):
    from .harness.dataset import read_depths, read_frames
    from .inpaint import edit_stroke_task
    from .latent import decode_depth, decode_image, save_latent
    from .rays import load_poses
    from .rf_core import load_checkpoint

    ckpt = _require(args.checkpoint, "checkpoint")
    if not 0 < args.t_inv <= 1:
        raise ConfigError("--t-inv must lie in (0, 1]")
    frames = read_frames(_require(args.frames, "frames"))
    depths = read_depths(_require(args.depth, "depth")) if args.depth else None
    poses = load_poses(_require(args.poses, "poses")) if args.poses else None
    cond = _condition(args)
    model = load_checkpoint(ckpt)
    trace = _trace(args)
    joint, rec = edit_stroke_task(frames, cond, model, _sampler_config(args), t_inv=args.t_inv,
                                  depths=depths, poses=poses, trace=trace)
    _write_trace(out, trace)
    save_latent(out / "latent.sflt", joint, rec, cond)
    _write_views(out, [decode_image(v) for v in joint.image], [decode_depth(v) for v in joint.depth])
    return [ckpt, args.frames, args.depth, args.poses]


def cmd_render(args, out):
    from .gsplat.cloud import save_ply
    from .gsplat.decoder import decode_gaussians, load_decoder, render_views
    from .harness.dataset import load_scene
    from .latent import load_latent
    from .rays import load_poses

    dec = _require(args.decoder, "decoder")
    if (args.scene is None) == (args.latent is None):
        raise ConfigError("give exactly one of --scene or --latent")
    if args.scene is not None:
        rec = load_scene(_require(args.scene, "scene"))
        joint, poses = rec.latent(), rec.poses
    else:
        joint, poses, _ = load_latent(_require(args.latent, "latent"))
        if poses is None:
            raise ConfigError("latent archive carries no poses")
    targets = load_poses(_require(args.poses, "poses")) if args.poses else poses
    model = load_decoder(dec)
    size = args.size or joint.data.shape[2] * 8
    images = render_views(model, joint, poses, targets, size)
    _write_views(out, np.clip(images, 0, 1), prefix="render_")
    save_ply(out / "cloud.ply", decode_gaussians(model, joint, poses, size))
    return [dec, args.scene, args.latent, args.poses]


def cmd_eval(args, out, config_data):
    from .harness.experiments import EXPERIMENTS, ExperimentConfig, run_experiment

    if args.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {args.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    try:
        cfg = ExperimentConfig.from_dict(dict(config_data or {}, seed=args.seed,
                                              **({"checkpoint": args.checkpoint} if args.checkpoint else {})))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.checkpoint is not None and not Path(cfg.checkpoint).is_file():
        raise ConfigError(f"checkpoint {cfg.checkpoint} not found; create it with `raysplat train rf` "
                          "or drop --checkpoint to train into the cache")
    cache = Path(args.cache) if args.cache else out / "cache"
    run_experiment(args.experiment, cfg, out, cache, train=not args.no_train)
    return [cfg.checkpoint]


# -- parser -------------------------------------------------------------------------


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--out", default=None, help="output directory (default: $RAYSPLAT_OUTPUT or ./outputs)")
    g.add_argument("--config", default=None, help="TOML or JSON file whose keys set this command's options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    g.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _sampler_flags(p, steps=200, t_stop=150, guidance="7,5,1"):
    g = p.add_argument_group("sampler")
    g.add_argument("--steps", type=int, default=steps, help=f"Euler steps N (default: {steps})")
    g.add_argument("--t-stop", type=int, default=t_stop, help=f"last step index with ray updates (default: {t_stop})")
    g.add_argument("--guidance", type=_guidance, default=guidance,
                   help=f"image,depth,ray guidance scales (default: {guidance})")
    g.add_argument("--swap-period", type=int, default=3, help="external guidance swap period (default: 3)")
    g.add_argument("--trace", action="store_true", help="write per-step records to trace.jsonl")


def _condition_flags(p):
    from .harness.scenes import PALETTE_NAMES

    g = p.add_argument_group("condition")
    g.add_argument("--dominant", default="red", help=f"dominant color: {', '.join(PALETTE_NAMES)} (default: red)")
    g.add_argument("--kind", choices=("object", "scenery"), default="object", help="scene kind (default: object)")
    g.add_argument("--primitives", type=int, default=8, help="primitive count in the descriptor (default: 8)")


def build_parser():
    parser = _Parser(prog="raysplat", formatter_class=_formatter,
                     description="Joint image/depth/ray flow sampling and Gaussian decoding on toy scenes.")
    parser.add_argument("--version", action="version", version=f"raysplat {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    leaves = {}

    def leaf(parent, name, func, help_text, key=None):
        p = parent.add_parser(name, help=help_text, description=help_text, formatter_class=_formatter)
        p.set_defaults(func=func)
        leaves[key or name] = p
        return p

    ds = sub.add_parser("dataset", help="toy dataset tools", formatter_class=_formatter)
    ds_sub = ds.add_subparsers(dest="action", metavar="action", parser_class=_Parser, required=True)
    p = leaf(ds_sub, "gen", cmd_dataset_gen, "render toy scenes to disk", "dataset gen")
    p.add_argument("--count", type=int, default=100, help="number of scenes (default: 100)")
    p.add_argument("--start", type=int, default=0, help="first scene seed (default: 0)")
    p.add_argument("--size", type=int, default=64, help="frame size in pixels (default: 64)")
    p.add_argument("--novel-views", type=int, default=2, help="held-out cameras per scene (default: 2)")
    p.add_argument("--kind", choices=("object", "scenery"), default=None, help="force one scene kind")
    _common(p)

    tr = sub.add_parser("train", help="model training", formatter_class=_formatter)
    tr_sub = tr.add_subparsers(dest="action", metavar="action", parser_class=_Parser, required=True)
    p = leaf(tr_sub, "rf", cmd_train_rf, "train the joint velocity model", "train rf")
    p.add_argument("--dataset", default=None, help="dataset directory from `dataset gen`")
    p.add_argument("--steps", type=int, default=2000, help="optimizer steps (default: 2000)")
    p.add_argument("--batch-size", type=int, default=16, help="batch size (default: 16)")
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate (default: 1e-3)")
    p.add_argument("--hidden", type=int, default=256, help="hidden width (default: 256)")
    p.add_argument("--freqs", type=int, default=4, help="time-embedding frequencies (default: 4)")
    p.add_argument("--cond-dropout", type=float, default=0.1, help="condition dropout rate (default: 0.1)")
    p.add_argument("--image-only", action="store_true", help="train a single-view image model instead")
    _common(p)
    p = leaf(tr_sub, "decoder", cmd_train_decoder, "train the Gaussian decoder", "train decoder")
    p.add_argument("--dataset", default=None, help="dataset directory with novel/ views")
    p.add_argument("--steps", type=int, default=200, help="optimizer steps (default: 200)")
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate (default: 1e-3)")
    p.add_argument("--aux-threshold", type=float, default=0.5, help="fraction of steps before the aux loss (default: 0.5)")
    p.add_argument("--no-depth", action="store_true", help="zero the depth group (ablation)")
    _common(p)

    p = leaf(sub, "sample", cmd_sample, "generate a joint latent and its cameras")
    p.add_argument("--checkpoint", default=None, help="velocity model checkpoint")
    p.add_argument("--views", type=int, default=8, help="views K (default: 8)")
    p.add_argument("--external", default=None, help="single-view model enabling guidance swap")
    p.add_argument("--external-scale", type=float, default=3.0, help="external model guidance scale (default: 3.0)")
    _sampler_flags(p)
    _condition_flags(p)
    _common(p)

    p = leaf(sub, "pose-estimate", cmd_pose_estimate, "estimate cameras of a frame set by inpainting rays")
    p.add_argument("--checkpoint", default=None, help="velocity model checkpoint")
    p.add_argument("--frames", default=None, help="directory of numbered PNG frames")
    p.add_argument("--depth", default=None, help="directory of numbered PFM depth maps (optional)")
    p.add_argument("--reference", default=None, help="scene directory with ground-truth poses to score against")
    _sampler_flags(p, t_stop=40, guidance="1,1,1")
    _common(p)

    p = leaf(sub, "nvs", cmd_nvs, "fill in unknown views of a scene")
    p.add_argument("--checkpoint", default=None, help="velocity model checkpoint")
    p.add_argument("--scene", default=None, help="scene directory")
    p.add_argument("--known", type=_index_list, default="0,7", help="known view indices (default: 0,7)")
    _sampler_flags(p, steps=100, t_stop=100, guidance="1,1,1")
    _common(p)

    ed = sub.add_parser("edit", help="editing by inversion", formatter_class=_formatter)
    ed_sub = ed.add_subparsers(dest="action", metavar="action", parser_class=_Parser, required=True)
    p = leaf(ed_sub, "object", cmd_edit_object, "regenerate the masked object under a new condition", "edit object")
    p.add_argument("--checkpoint", default=None, help="velocity model checkpoint")
    p.add_argument("--scene", default=None, help="scene directory")
    p.add_argument("--masks", default=None, help="directory of numbered PNG object masks (default: <scene>/masks)")
    p.add_argument("--t-inv", type=float, default=190 / 200, help="inversion time (default: 0.95)")
    _sampler_flags(p)
    _condition_flags(p)
    _common(p)
    p = leaf(ed_sub, "stroke", cmd_edit_stroke, "turn painted strokes into scene content", "edit stroke")
    p.add_argument("--checkpoint", default=None, help="velocity model checkpoint")
    p.add_argument("--frames", default=None, help="directory of stroked PNG frames")
    p.add_argument("--depth", default=None, help="directory of PFM depth maps (optional)")
    p.add_argument("--poses", default=None, help="poses.json (optional)")
    p.add_argument("--t-inv", type=float, default=100 / 200, help="inversion time (default: 0.5)")
    _sampler_flags(p)
    _condition_flags(p)
    _common(p)

    p = leaf(sub, "render", cmd_render, "decode Gaussians from a latent and render views")
    p.add_argument("--decoder", default=None, help="decoder checkpoint (.npz)")
    p.add_argument("--scene", default=None, help="scene directory to encode")
    p.add_argument("--latent", default=None, help="latent archive with poses (.sflt)")
    p.add_argument("--poses", default=None, help="target poses.json (default: the source cameras)")
    p.add_argument("--size", type=int, default=None, help="render size (default: latent size x 8)")
    _common(p)

    p = leaf(sub, "eval", cmd_eval, "run a named experiment and write its report")
    p.add_argument("experiment", help="gen, pose, nvs-interp, nvs-extrap, edit or decoder-ablation")
    p.add_argument("--checkpoint", default=None, help="use this velocity model instead of the cache")
    p.add_argument("--cache", default=None, help="model cache directory (default: <out>/cache)")
    p.add_argument("--no-train", action="store_true", help="fail instead of training a missing model")
    _common(p)
    return parser, leaves


def _leaf_name(args):
    return f"{args.command} {args.action}" if getattr(args, "action", None) else args.command


def _apply_config(parser, leaves, argv, args):
    """Config-file keys become defaults of the chosen command; explicit flags still win."""
    if args.config is None:
        return args, None
    data = load_config_file(args.config)
    if args.command == "eval":
        return args, data
    leaf = leaves[_leaf_name(args)]
    allowed = {a.dest for a in leaf._actions} - _UNRECORDED - {"help"}
    norm = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(norm) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys for {_leaf_name(args)}: {unknown}")
    leaf.set_defaults(**norm)
    args = parser.parse_args(argv)
    for key in ("guidance", "known"):
        if key in norm and isinstance(getattr(args, key), (list, tuple, str)):
            setattr(args, key, (_guidance if key == "guidance" else _index_list)(getattr(args, key)))
    return args, data


def _error(kind, exc, code):
    msg = " ".join(str(exc).split())
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        args, config_data = _apply_config(parser, leaves, argv, args)
        # string defaults skip argparse's type conversion only when unchanged
        if isinstance(getattr(args, "guidance", None), str):
            args.guidance = _guidance(args.guidance)
        if isinstance(getattr(args, "known", None), str):
            args.known = _index_list(args.known)
        if getattr(args, "steps", 1) < 1:
            raise ConfigError("--steps must be at least 1")
        if hasattr(args, "t_stop") and not 1 <= args.t_stop <= args.steps:
            raise ConfigError("--t-stop must lie in [1, --steps]")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError as exc:
        return _error("config", exc, 2)
    except (argparse.ArgumentTypeError, ValueError, OSError) as exc:
        return _error("config", exc, 2)

    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or os.environ.get("RAYSPLAT_OUTPUT", "outputs"))
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            out.mkdir(parents=True, exist_ok=True)
            if args.command == "eval":
                inputs = cmd_eval(args, out, config_data)
            else:
                inputs = args.func(args, out)
            inputs = [Path(p) for p in inputs if p is not None]
            if args.config:
                inputs.append(Path(args.config))
            write_manifest(out, args, inputs, config_data)
    except ConfigError as exc:
        return _error("config", exc, 2)
    except Exception as exc:  # noqa: BLE001 - reported as one line
        log.debug("command failed", exc_info=True)
        return _error("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
