import math

import numpy as np
import pytest

from oracles import brute_match, direct_prior
from nsanet.points import POINT_DTYPE, PointCloud, PointRecord, Trajectory
from nsanet.priors import (CoverageError, PriorParams, annotate_cloud, build_prior_pyramid,
                           compute_point_prior, compute_rmax, fold_range, match_indices,
                           match_sample, pool_weighted, window_trajectory)
from nsanet.voxel import GridSpec, voxelize


def make_cloud(xyz, times, prob=None, labels=None):
    pts = np.zeros(len(times), dtype=POINT_DTYPE)
    pts["x"], pts["y"], pts["z"] = np.asarray(xyz, dtype=np.float64).T
    pts["gps_time"] = times
    pts["num_returns"] = pts["return_number"] = 1
    if prob is not None:
        pts["prior_prob"] = prob
    if labels is not None:
        pts["label"] = labels
    return PointCloud(pts)


def line_trajectory(n=200, dt=0.05, t0=100.0, altitude=900.0):
    t = t0 + dt * np.arange(n)
    return Trajectory(np.column_stack([t, np.linspace(-50, 150, n), np.full(n, 40.0),
                                       np.full(n, altitude)]))


# ------------------------------------------------------------------ r_max

def test_rmax_examples():
    assert compute_rmax(1e6, 299792458) == pytest.approx(149.896229, abs=1e-6)
    assert compute_rmax(0.5e6, 3.0e8) == 300.0
    assert compute_rmax(2e5) == 2 * compute_rmax(4e5)
    for bad in [(0, 3e8), (-1, 3e8), (1e5, 0)]:
        with pytest.raises(ValueError):
            compute_rmax(*bad)
    assert PriorParams(1e6).r_max == compute_rmax(1e6)


# ------------------------------------------------------------------ window / match

def test_window_subset_and_errors():
    traj = line_trajectory()
    cloud = make_cloud([[0, 0, 0], [1, 1, 1]], [103.0, 104.0])
    win = window_trajectory(traj, cloud)
    t = traj.times
    expect = np.nonzero((t >= 103.0 - 1e-2) & (t <= 104.0 + 1e-2))[0]
    assert np.array_equal(win.times, t[expect])
    assert np.all(np.diff(expect) == 1)
    with pytest.raises(CoverageError, match="does not cover cloud time span"):
        window_trajectory(traj, make_cloud([[0, 0, 0]], [500.0]))


def test_match_exact_and_tie():
    traj = Trajectory(np.array([[1.0, 0, 0, 0], [1.004, 1, 0, 0], [2.0, 2, 0, 0]]))
    assert match_sample(traj, 1.004)[1] == 1
    assert match_sample(traj, 1.002)[1] == 0          # equidistant: earlier sample
    with pytest.raises(LookupError):
        match_sample(traj, 1.5)


def test_match_against_linear_scan():
    rng = np.random.default_rng(0)
    times = np.sort(rng.uniform(0, 100, 5000))
    times[10:13] = times[10]                           # duplicate run
    query = np.concatenate([rng.uniform(-1, 101, 10_000), times[:50],
                            (times[:-1] + times[1:])[:50] / 2])
    for tol in (1e-2, 1e-3, 10.0):
        assert np.array_equal(match_indices(times, query, tol), brute_match(times, query, tol))


# ------------------------------------------------------------------ fold / prior

@pytest.mark.parametrize("rng_n, pia, r_obs, prob", [
    (50.0, 1, 50.0, 1 / 3), (150.0, 1, 0.0, 0.0), (200.0, 2, 50.0, 1 / 3)])
def test_point_prior_examples(rng_n, pia, r_obs, prob):
    params = PriorParams(prf=1.0, c=300.0)           # r_max = 150
    sample = np.array([0.0, 0.0, 0.0, rng_n])
    out = compute_point_prior(PointRecord(0.0, 0.0, 0.0, 0.0), sample, params)
    assert out.range_n == rng_n and out.pia_zone == pia
    assert out.r_obs == pytest.approx(r_obs, abs=1e-12)
    assert out.prob == pytest.approx(prob, abs=1e-12)


def test_zero_range_rejected():
    with pytest.raises(ValueError, match="range"):
        compute_point_prior(PointRecord(1.0, 2.0, 3.0, 0.0), np.array([0, 1.0, 2.0, 3.0]),
                            PriorParams(1e5))


def test_point_prior_matches_direct_formula():
    rng = np.random.default_rng(1)
    params = PriorParams(prf=7e5)
    for _ in range(2000):
        p = rng.uniform(-500, 500, 3)
        s = np.concatenate([[0.0], rng.uniform(-500, 500, 2), rng.uniform(500, 3000, 1)])
        got = compute_point_prior(PointRecord(*p, gps_time=0.0), s, params)
        ref = direct_prior(*p, *s[1:], params.r_max)
        assert (got.range_n, got.pia_zone, got.r_obs, got.prob) == ref


def test_reconstruction_identity_and_range():
    rng = np.random.default_rng(2)
    r_max = compute_rmax(4e5)
    ranges = np.concatenate([rng.uniform(1e-3, 20 * r_max, 100_000),
                             r_max * np.arange(1, 20), np.nextafter(r_max * np.arange(1, 20), 0)])
    pia, r_obs, prob = fold_range(ranges, r_max)
    assert np.all((prob >= 0) & (prob < 1))
    recon = prob * r_max + (pia - 1) * r_max
    boundary = r_obs == 0
    assert np.all(np.abs(recon - ranges)[~boundary] <= 1e-9 * ranges[~boundary])
    assert np.allclose(pia[boundary], ranges[boundary] / r_max, rtol=0, atol=1e-9)


# ------------------------------------------------------------------ annotate

def test_annotate_matches_per_point_prior():
    rng = np.random.default_rng(3)
    traj = line_trajectory(n=2000, dt=0.005)
    n = 3000
    times = rng.uniform(traj.times[0], traj.times[-1], n)
    times[:5] = traj.times[-1] + 0.005 + 0.002 * np.arange(5)  # beyond the last sample
    cloud = make_cloud(np.column_stack([rng.uniform(0, 100, (n, 2)), rng.uniform(0, 30, n)]), times)
    params = PriorParams(prf=4e5)
    out, unmatched = annotate_cloud(cloud, traj, params)
    idx = brute_match(traj.times, times, params.time_match_tol)
    assert unmatched == int(np.sum(idx < 0)) and 0 < unmatched < 5
    for i in rng.choice(n, 300, replace=False):
        if idx[i] < 0:
            assert out.points["prior_prob"][i] == 0
            continue
        ref = direct_prior(*cloud.xyz[i], *traj.positions[idx[i]], params.r_max)[3]
        assert out.points["prior_prob"][i] == np.float32(ref)


def test_annotate_rejects_uncovered_cloud():
    with pytest.raises(CoverageError):
        annotate_cloud(make_cloud([[0, 0, 0]], [1.0]), line_trajectory(), PriorParams(4e5))


# ------------------------------------------------------------------ pyramid

def _grid(xyz, prob, edge=4):
    cloud = make_cloud(xyz, np.zeros(len(prob)), prob=prob)
    return voxelize(cloud, GridSpec((0, 0, 0), edge, 1.0))


def test_pyramid_all_ones():
    rng = np.random.default_rng(4)
    xyz = rng.uniform(0, 8, (200, 3))
    pyr = build_prior_pyramid(_grid(xyz, np.ones(200, dtype=np.float32) * np.float32(0.999), 8), 4)
    for level, w in zip(pyr.levels, pyr.weights):
        assert np.allclose(level[w > 0], np.float32(0.999))
        assert np.all(level[w == 0] == 0)
    assert [lv.shape for lv in pyr.levels] == [(8,) * 3, (4,) * 3, (2,) * 3, (1,) * 3]


def test_pyramid_single_point_and_hand_pool():
    pyr = build_prior_pyramid(_grid([[0.5, 1.5, 0.5]], [0.25]), 2)
    assert pyr.levels[0][0, 1, 0] == 0.25 and pyr.levels[0].sum() == 0.25
    assert pyr.levels[1][0, 0, 0] == 0.25
    # two cells in one block: 3 points at 0.2, 1 point at 0.6 -> (0.6 + 0.6) / 4
    vals = np.zeros((2, 2, 2))
    wts = np.zeros((2, 2, 2))
    vals[0, 0, 0], wts[0, 0, 0] = 0.2, 3
    vals[1, 1, 1], wts[1, 1, 1] = 0.6, 1
    pooled, w = pool_weighted(vals, wts)
    assert pooled[0, 0, 0] == pytest.approx(0.3) and w[0, 0, 0] == 4


def test_pyramid_odd_dims_and_mass():
    rng = np.random.default_rng(5)
    vals = rng.uniform(0, 1, (5, 3, 4))
    wts = rng.integers(0, 3, (5, 3, 4)).astype(float)
    pooled, w = pool_weighted(vals, wts)
    assert pooled.shape == (3, 2, 2)
    assert w.sum() == wts.sum()
    assert np.sum(pooled * w) == pytest.approx(np.sum(vals * wts))
    assert np.all((pooled >= 0) & (pooled <= 1))


def test_pyramid_empty_and_missing_priors():
    vals, w = pool_weighted(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))
    assert np.all(vals == 0) and np.all(w == 0)
    g = _grid([[0.5, 0.5, 0.5]], [0.5])
    g.priors = None
    with pytest.raises(ValueError, match="prior"):
        build_prior_pyramid(g, 2)


def test_fold_rejects_nonpositive():
    with pytest.raises(ValueError):
        fold_range(np.array([1.0, 0.0]), 10.0)
    assert math.isclose(fold_range(np.array([25.0]), 10.0)[2][0], 0.5)
