"""Estimate cameras for eight frames of a held-out toy scene by inpainting rays.

Trains (or loads from ./outputs/cache) the reference velocity model, which takes
around ten minutes on one core the first time, then fills in the ray channels
of a scene whose frames and depths are known.

    python demos/pose_from_frames.py [scene_seed]
"""
import sys

import numpy as np

from raysplat.harness.experiments import ExperimentConfig, velocity_model
from raysplat.harness.metrics import center_errors, eval_pose_accuracy, relative_rotation_errors
from raysplat.harness.scenes import SceneConfig, generate_scene
from raysplat.inpaint import estimate_poses_task

config = ExperimentConfig()
model = velocity_model(config, "outputs/cache")
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1600
scene = generate_scene(seed, SceneConfig(novel_views=0))

pred = estimate_poses_task(scene.images, model, config.sampler("pose_sampler"),
                           rng=np.random.default_rng(seed), depths=scene.depths)
print("relative rotation error vs view 0 (deg):", np.round(relative_rotation_errors(pred, scene.poses), 2))
print("per-view center error / scale:", np.round(center_errors(pred, scene.poses) / scene.scale, 3))
print(eval_pose_accuracy(pred, scene.poses, scene.scale))
