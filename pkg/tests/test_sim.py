from dataclasses import replace

import numpy as np
import pytest

from nsanet.priors import PriorParams, annotate_cloud
from nsanet.sim import (SceneConfig, generate_terrain_and_objects, generate_trajectory,
                        inject_complex_noise, inject_sparse_noise, inject_systematic_noise,
                        noise_budget, scene_config_for, simulate_scene, terrain_height)

INJECTORS = (inject_sparse_noise, inject_systematic_noise, inject_complex_noise)


def test_trajectory_shape():
    cfg = SceneConfig(extent=100, altitude=1000)
    traj = generate_trajectory(cfg)
    assert np.all(traj.positions[:, 2] == 1000)
    assert np.all(np.diff(traj.times) > 0)
    assert traj.positions[0, 0] <= 0 and traj.positions[-1, 0] >= 100


def test_config_validation():
    with pytest.raises(ValueError, match="noise_fraction"):
        SceneConfig(noise_fraction=0.2)
    with pytest.raises(ValueError, match="fractions"):
        SceneConfig(sparse_fraction=0.5, systematic_fraction=0.5, complex_fraction=0.1)
    SceneConfig(sparse_fraction=0.2, systematic_fraction=0.3, complex_fraction=0.5)


def test_terrain_only_respects_relief():
    cfg = SceneConfig(object_density=0, relief=2.5, seed=4)
    cloud = generate_terrain_and_objects(cfg)
    z = cloud.points["z"]
    assert z.max() - z.min() <= 2.5
    assert np.all(cloud.labels == 0)


@pytest.mark.parametrize("density", [2.0, 10.0, 25.0])
def test_point_count_matches_density(density):
    cfg = SceneConfig(ground_density=density, object_density=0)
    n = len(generate_terrain_and_objects(cfg))
    assert abs(n - density * cfg.area) <= 0.05 * density * cfg.area


def test_objects_rise_above_terrain():
    cfg = SceneConfig(seed=2)
    cloud = generate_terrain_and_objects(cfg)
    ground = terrain_height(cfg, cloud.points["x"], cloud.points["y"])
    assert np.sum(cloud.points["z"] - ground > 3.0) > 100


def test_simulation_is_deterministic():
    a, ta = simulate_scene(SceneConfig(seed=11))
    b, tb = simulate_scene(SceneConfig(seed=11))
    c, _ = simulate_scene(SceneConfig(seed=12))
    assert a.points.tobytes() == b.points.tobytes()
    assert ta.samples.tobytes() == tb.samples.tobytes()
    assert a.points.tobytes() != c.points.tobytes()


def test_zero_noise_is_identity():
    cfg = SceneConfig(noise_fraction=0.0)
    traj = generate_trajectory(cfg)
    clean = generate_terrain_and_objects(cfg, traj)
    for inject in INJECTORS:
        assert inject(clean, cfg, traj).points.tobytes() == clean.points.tobytes()


@pytest.mark.parametrize("fraction", [0.005, 0.01, 0.02, 0.03, 0.05])
def test_noise_fraction_within_tolerance(fraction):
    cloud, _ = simulate_scene(SceneConfig(noise_fraction=fraction, seed=5))
    observed = cloud.labels.mean()
    assert abs(observed - fraction) <= 0.1 * fraction


def test_default_imbalance_in_expected_band():
    cloud, _ = simulate_scene(SceneConfig())
    assert 0.01 <= cloud.labels.mean() <= 0.03


def test_budget_split():
    b = noise_budget(SceneConfig(noise_fraction=0.02), 9800)
    assert sum(b.values()) == 200
    assert b == {"sparse": 60, "systematic": 80, "complex": 60}


def test_injected_points_are_labelled_and_in_bounds():
    cfg = SceneConfig(seed=8)
    traj = generate_trajectory(cfg)
    clean = generate_terrain_and_objects(cfg, traj)
    for inject in INJECTORS:
        out = inject(clean, cfg, traj)
        added = out.points[len(clean):]
        assert len(added) > 0
        assert out.points[:len(clean)].tobytes() == clean.points.tobytes()
        assert np.all(added["label"] == 1)
        assert np.all((added["x"] >= 0) & (added["x"] < cfg.extent))
        assert np.all((added["y"] >= 0) & (added["y"] < cfg.extent))
        assert np.all((added["z"] >= 0) & (added["z"] <= cfg.ceiling))


def test_sparse_noise_keeps_clearance():
    cfg = SceneConfig(seed=3)
    traj = generate_trajectory(cfg)
    clean = generate_terrain_and_objects(cfg, traj)
    added = inject_sparse_noise(clean, cfg, traj).points[len(clean):]
    ground = terrain_height(cfg, added["x"], added["y"])
    assert np.all(added["z"] - ground >= cfg.clearance)


def test_gps_range_inside_trajectory():
    cloud, traj = simulate_scene(SceneConfig(seed=9))
    t0, t1 = cloud.gps_range
    s0, s1 = traj.time_span
    assert s0 <= t0 and t1 <= s1


@pytest.mark.parametrize("seed", range(4))
def test_systematic_noise_sits_near_wraparound(seed):
    cfg = scene_config_for(seed, SceneConfig(), 0)
    traj = generate_trajectory(cfg)
    clean = generate_terrain_and_objects(cfg, traj)
    noisy = inject_systematic_noise(clean, cfg, traj)
    added = noisy.subset(np.arange(len(clean), len(noisy)))
    annotated, unmatched = annotate_cloud(added, traj, PriorParams(cfg.prf, cfg.c))
    assert unmatched == 0
    p = annotated.points["prior_prob"].astype(np.float64)
    edge = cfg.band / cfg.r_max
    near = (p <= edge + 1e-6) | (p >= 1 - edge - 1e-6)
    assert near.mean() >= 0.95


def test_scene_config_for_varies_band_height():
    base = SceneConfig()
    heights = []
    for i in range(20):
        cfg = scene_config_for(i, base, seed=0)
        heights.append(cfg.altitude % base.r_max)
        assert cfg.seed != base.seed or i == 0
    assert min(heights) >= 8.0 and max(heights) <= 26.0
    assert np.std(heights) > 2.0
    assert scene_config_for(3, base, 0) == scene_config_for(3, base, 0)


def test_rng_streams_are_independent():
    cfg = SceneConfig(seed=1)
    traj = generate_trajectory(cfg)
    clean = generate_terrain_and_objects(cfg, traj)
    # changing the systematic mixture must not perturb the sparse draw
    other = replace(cfg, systematic_fraction=0.5, complex_fraction=0.2)
    a = inject_sparse_noise(clean, cfg, traj).points
    b = inject_sparse_noise(clean, other, traj).points
    assert a.tobytes() == b.tobytes()
