"""Small synthetic maps shared by solver tests."""
import numpy as np

from structslam.pipeline import build_map, perturb_poses
from structslam.sim import SceneConfig, generate_scene, render_observations


def noiseless_store(seed=0, with_lines=True, n_keyframes=10, noise_px=0.0, outlier_rate=0.0):
    cfg = SceneConfig(n_keyframes=n_keyframes)
    scene = generate_scene(cfg, seed)
    obs = render_observations(scene, noise_px, outlier_rate, 0.0, seed + 1)
    store = build_map(scene, obs, scene.poses, use_points=True, use_lines=with_lines)
    return scene, obs, store


def perturbed(poses, seed, rot_deg=1.0, trans_m=0.05):
    return perturb_poses(poses, rot_deg, trans_m, np.random.default_rng(seed))
