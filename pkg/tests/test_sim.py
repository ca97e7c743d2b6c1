import json

import numpy as np
import pytest

from structslam.errors import ConfigError, InfeasibleConfig
from structslam.sim import (
    SceneConfig,
    generate_scene,
    observations_to_dict,
    planar_fixture,
    preset_config,
    project,
    render_observations,
    scene_from_dict,
    scene_to_dict,
    simulate_scale_drift,
    trajectory_from_dict,
    trajectory_to_dict,
)


def test_same_seed_same_scene():
    a = json.dumps(scene_to_dict(generate_scene(SceneConfig(), 7)))
    b = json.dumps(scene_to_dict(generate_scene(SceneConfig(), 7)))
    assert a == b
    c = json.dumps(scene_to_dict(generate_scene(SceneConfig(), 8)))
    assert a != c


def test_requested_counts():
    cfg = SceneConfig(n_keyframes=20, n_points=200, n_lines=50)
    s = generate_scene(cfg, 0)
    assert len(s.poses) == 20 and len(s.points) == 200 and len(s.lines) == 50 and len(s.planes) == 3
    assert np.sum(s.point_plane >= 0) == 160


def test_every_landmark_seen_twice():
    s = generate_scene(SceneConfig(), 1)
    obs = render_observations(s)
    assert np.all(np.bincount(obs.p_gt, minlength=len(s.points)) >= 2)
    assert np.all(np.bincount(obs.l_gt, minlength=len(s.lines)) >= 2)


def test_plane_points_lie_on_planes():
    s = generate_scene(SceneConfig(), 2)
    for X, k in zip(s.points, s.point_plane):
        if k >= 0:
            pl = s.planes[k].equation()
            assert abs(X @ pl.n + pl.d) < 1e-12
    for S, k in zip(s.lines, s.line_plane):
        if k >= 0:
            pl = s.planes[k].equation()
            assert np.abs(S @ pl.n + pl.d).max() < 1e-12


def test_clean_mode_exact_projections():
    s = generate_scene(SceneConfig(), 3)
    obs = render_observations(s)
    for k in range(0, len(obs.p_frame), 37):
        uv, _ = project(s.poses[obs.p_frame[k]], s.K, s.points[obs.p_gt[k]])
        assert np.allclose(uv[0], obs.p_uv[k], rtol=0, atol=1e-9)
    assert np.array_equal(obs.p_id, obs.p_gt) and np.array_equal(obs.l_id, obs.l_gt)
    assert not obs.l_outlier.any()


def test_outlier_rate_binomial():
    s = generate_scene(SceneConfig(n_keyframes=20, n_lines=60), 0)
    obs = render_observations(s, 0.0, 0.1, 0.0, 5)
    n = len(obs.l_id)
    k = int(obs.l_outlier.sum())
    sd = np.sqrt(n * 0.1 * 0.9)
    assert abs(k - 0.1 * n) <= 3 * sd
    assert np.all(obs.l_id[obs.l_outlier] != obs.l_gt[obs.l_outlier])
    assert np.array_equal(obs.l_id[~obs.l_outlier], obs.l_gt[~obs.l_outlier])


def test_mask_corruption_recorded():
    s = generate_scene(SceneConfig(), 0)
    obs = render_observations(s, 0.0, 0.0, 1.0, 0)
    assert len(obs.corrupted_frames) == len(s.poses)
    assert all(kind in ("merge", "split") for _, kind, _, _ in obs.corrupted_frames)


def test_invalid_inputs():
    s = generate_scene(SceneConfig(), 0)
    with pytest.raises(ConfigError):
        render_observations(s, -1.0)
    with pytest.raises(ConfigError):
        render_observations(s, 0.0, 1.5)
    with pytest.raises(ConfigError):
        SceneConfig(trajectory="spiral")
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        preset_config("nope")
    with pytest.raises(InfeasibleConfig):
        generate_scene(SceneConfig(width=2, height=2), 0)


def test_presets():
    assert preset_config("low-texture").n_points < preset_config("default").n_points
    loop = generate_scene(preset_config("corridor-loop"), 0)
    assert loop.loop == (19, 0)
    assert loop.poses[-1].allclose(loop.poses[0], atol=1e-12)
    cfg = SceneConfig.from_dict({"preset": "low-texture", "n_points": 20})
    assert cfg.n_points == 20 and cfg.name == "low-texture"


def test_serialisation_roundtrip():
    s = generate_scene(SceneConfig(), 4)
    d = scene_to_dict(s)
    s2 = scene_from_dict(json.loads(json.dumps(d)))
    assert json.dumps(scene_to_dict(s2)) == json.dumps(d)
    ts, poses = trajectory_from_dict(trajectory_to_dict(s.poses, s.timestamps))
    assert np.array_equal(ts, s.timestamps)
    assert all(a.allclose(b, atol=0) for a, b in zip(poses, s.poses))
    json.dumps(observations_to_dict(render_observations(s, 1.0, 0.1, 0.2, 0)))
    with pytest.raises(ConfigError):
        scene_from_dict({"version": 99})


def test_scale_drift():
    s = generate_scene(preset_config("corridor-loop"), 0)
    dr, sigma = simulate_scale_drift(s.poses, 0.1)
    assert sigma[0] == 1 and sigma[-1] == pytest.approx(1.1)
    C = np.array([p.center for p in s.poses])
    D = np.array([p.center for p in dr])
    steps_gt = np.linalg.norm(np.diff(C, axis=0), axis=1)
    steps = np.linalg.norm(np.diff(D, axis=0), axis=1)
    assert np.allclose(steps / steps_gt, sigma[:-1])
    assert all(np.array_equal(a.R, b.R) for a, b in zip(dr, s.poses))


def test_planar_fixture_layout():
    fx = planar_fixture(0)
    y = fx["labels"]
    assert [int(np.sum(y == k)) for k in range(3)] == [200, 200, 200]
    assert np.sum(y == -1) / len(y) == pytest.approx(0.2, abs=0.01)
    m1, m2 = fx["masks"]
    assert set(np.unique(y[m1])) == {-1, 0, 1} and set(np.unique(y[m2])) == {-1, 2}
