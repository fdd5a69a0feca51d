"""Range-ambiguity priors for multiple-pulses-in-air returns.

Each return is matched to the sensor position at its GPS time, its slant
range is folded into the unambiguous window ``r_max = c / (2 * prf)``, and
the folded range becomes a probability: returns whose range sits close to a
zone transition (folded range near 0 or near ``r_max``) land near 0 or 1.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .points import Trajectory

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0


def compute_rmax(prf, c=SPEED_OF_LIGHT):
    if prf <= 0 or c <= 0:
        raise ValueError(f"prf and c must be positive, got prf={prf}, c={c}")
    return c / (2.0 * prf)


@dataclass(frozen=True)
class PriorParams:
    prf: float
    c: float = SPEED_OF_LIGHT
    time_match_tol: float = 1e-2
    r_max: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "r_max", compute_rmax(self.prf, self.c))
        if self.time_match_tol <= 0:
            raise ValueError("time_match_tol must be positive")


@dataclass(frozen=True)
class PointPrior:
    range_n: float
    pia_zone: int
    r_obs: float
    prob: float


class CoverageError(ValueError):
    pass


def window_trajectory(traj, cloud, tol=1e-2):
    """Samples with gps_time in ``[t_min - tol, t_max + tol]`` of the cloud."""
    t_min, t_max = cloud.gps_range
    times = traj.times
    lo = np.searchsorted(times, t_min - tol, side="left")
    hi = np.searchsorted(times, t_max + tol, side="right")
    if hi <= lo:
        raise CoverageError("trajectory does not cover cloud time span "
                            f"[{t_min}, {t_max}] (trajectory {traj.time_span})")
    return Trajectory(traj.samples[lo:hi])


def match_indices(times, query, tol):
    """Index of the nearest-in-time sample per query, or -1 if none within ``tol``.

    Exact ties between two neighbours resolve to the earlier sample.
    """
    query = np.asarray(query, dtype=np.float64)
    right = np.searchsorted(times, query, side="left")
    right = np.clip(right, 0, len(times) - 1)
    left = np.clip(right - 1, 0, len(times) - 1)
    d_left = np.abs(query - times[left])
    d_right = np.abs(times[right] - query)
    idx = np.where(d_left <= d_right, left, right)
    # duplicate timestamps: report the first of the run
    idx = np.searchsorted(times, times[idx], side="left")
    best = np.minimum(d_left, d_right)
    idx = np.where(best < tol, idx, -1)
    return idx


def match_sample(traj, gps_time, tol=1e-2):
    """Nearest trajectory sample to ``gps_time``; raises if none within ``tol``."""
    (i,) = match_indices(traj.times, [gps_time], tol)
    if i < 0:
        raise LookupError(f"no trajectory sample within {tol} s of t={gps_time}")
    return traj.samples[i]


def fold_range(range_n, r_max):
    """Return ``(pia_zone, r_obs, prob)`` arrays for positive ranges.

    The zone is derived from the folded remainder so that
    ``r_obs + (pia - 1) * r_max == range`` holds up to rounding, also where
    ``range / r_max`` would round across an integer.
    """
    range_n = np.asarray(range_n, dtype=np.float64)
    if np.any(range_n <= 0):
        raise ValueError("range must be positive (point coincides with sensor)")
    r_obs = np.fmod(range_n, r_max)
    r_obs = np.where(r_obs >= r_max, 0.0, r_obs)
    whole = np.rint((range_n - r_obs) / r_max).astype(np.int64)
    pia = np.where(r_obs > 0, whole + 1, whole)
    return pia, r_obs, r_obs / r_max


def compute_point_prior(point, sample, params):
    """Prior for one record against one trajectory sample (gps_time, x, y, z)."""
    dx = point.x - sample[1]
    dy = point.y - sample[2]
    dz = point.z - sample[3]
    range_n = float(np.sqrt(dx * dx + dy * dy + dz * dz))
    pia, r_obs, prob = fold_range(range_n, params.r_max)
    return PointPrior(range_n, int(pia), float(r_obs), float(prob))


def point_ranges(cloud, traj, tol):
    """Slant range per point (NaN where no sample matches) and the match index."""
    idx = match_indices(traj.times, cloud.points["gps_time"], tol)
    pos = traj.positions[np.maximum(idx, 0)]
    pts = cloud.points
    dx = pts["x"] - pos[:, 0]
    dy = pts["y"] - pos[:, 1]
    dz = pts["z"] - pos[:, 2]
    ranges = np.sqrt(dx * dx + dy * dy + dz * dz)
    ranges[idx < 0] = np.nan
    return ranges, idx


def _chunk_prior(job):
    cloud, window, params = job
    ranges, idx = point_ranges(cloud, window, params.time_match_tol)
    matched = idx >= 0
    if np.any(matched & (ranges <= 0)):
        raise ValueError("a point coincides with the sensor position (zero range)")
    prob = np.zeros(len(cloud), dtype=np.float64)
    _, _, prob[matched] = fold_range(ranges[matched], params.r_max)
    return prob, matched


def annotate_cloud(cloud, traj, params, workers=1):
    """Set ``prior_prob`` for every matchable point.

    Returns ``(annotated_cloud, unmatched_count)``; unmatched points keep
    prior 0.  Points are independent, so splitting them over ``workers``
    processes gives identical values.
    """
    from .parallel import chunks, pmap

    window = window_trajectory(traj, cloud, params.time_match_tol)
    parts = chunks(len(cloud), workers)
    jobs = [(cloud.subset(np.arange(a, b)), window, params) for a, b in parts]
    results = pmap(_chunk_prior, jobs, workers)
    prob = np.concatenate([r[0] for r in results])
    matched = np.concatenate([r[1] for r in results])
    unmatched = int((~matched).sum())
    if unmatched:
        log.warning("%d of %d points had no trajectory sample within %g s",
                    unmatched, len(cloud), params.time_match_tol)
    # float32 storage can round values just below 1 up to exactly 1.0
    prob32 = np.minimum(prob.astype(np.float32), np.nextafter(np.float32(1), np.float32(0)))
    return cloud.with_field("prior_prob", prob32), unmatched


@dataclass
class PriorPyramid:
    """Per-level prior maps; level 0 is the grid resolution, then 2x coarser each step.

    ``weights`` carries the occupancy (point count) behind each cell so that
    pooling averages only over evidence.
    """

    levels: list
    weights: list

    def __len__(self):
        return len(self.levels)


def pool_weighted(values, weights):
    """One 2x2x2 occupancy-weighted average pooling step (edges padded with empty cells)."""
    dims = values.shape
    padded = tuple(n + (n % 2) for n in dims)
    v = np.zeros(padded)
    w = np.zeros(padded)
    v[:dims[0], :dims[1], :dims[2]] = values
    w[:dims[0], :dims[1], :dims[2]] = weights
    out_dims = tuple(n // 2 for n in padded)

    def blocks(a):
        return a.reshape(out_dims[0], 2, out_dims[1], 2, out_dims[2], 2).sum(axis=(1, 3, 5))

    mass = blocks(v * w)
    wsum = blocks(w)
    pooled = np.divide(mass, wsum, out=np.zeros(out_dims), where=wsum > 0)
    return pooled, wsum


def build_prior_pyramid(grid, levels):
    """Prior pyramid of ``levels`` levels from a voxelized grid.

    Level 0 is the mean prior of the points in each cell (0 where empty).
    """
    if grid.priors is None:
        raise ValueError("grid carries no prior channel; voxelize an annotated cloud")
    vals = [np.asarray(grid.priors, dtype=np.float64)]
    wts = [np.asarray(grid.occupancy, dtype=np.float64)]
    for _ in range(levels - 1):
        v, w = pool_weighted(vals[-1], wts[-1])
        vals.append(v)
        wts.append(w)
    return PriorPyramid(vals, wts)
