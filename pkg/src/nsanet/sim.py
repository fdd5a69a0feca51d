"""Synthetic airborne scenes with labelled multiple-pulses-in-air noise.

A scene is a square patch of smooth terrain with trees and building shells,
scanned from a straight constant-altitude flight line.  Three noise kinds
are injected on top:

* sparse: isolated returns scattered through the empty air volume,
* systematic: returns whose slant range sits within a thin band around a
  range-ambiguity zone transition, forming a curved sheet across the swath,
* complex: compact Gaussian clusters hugging vegetation and roofs.

Each component draws from its own RNG stream spawned from ``cfg.seed``.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from .points import POINT_DTYPE, PointCloud, Trajectory
from .priors import SPEED_OF_LIGHT, compute_rmax

log = logging.getLogger(__name__)

_STREAMS = ("terrain", "ground", "objects", "object_points", "sparse", "systematic", "complex")


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 32.0             # square side, metres
    ground_density: float = 10.0     # points / m^2
    object_density: float = 4.0      # points / m^2 of scene area
    noise_fraction: float = 0.02
    prf: float = 1.0e6
    c: float = SPEED_OF_LIGHT
    altitude: float = 920.0          # sensor height above terrain base
    seed: int = 0
    sparse_fraction: float = 0.3
    systematic_fraction: float = 0.4
    complex_fraction: float = 0.3
    relief: float = 3.0              # max terrain height variation
    ceiling: float = 30.0            # top of the simulated air volume
    band: float = 2.0                # systematic band half-width (m of range)
    clearance: float = 3.0           # sparse noise keeps this far from surfaces
    n_trees: int = 6
    n_buildings: int = 2
    speed: float = 60.0              # m/s along x
    traj_rate: float = 200.0         # trajectory samples per second
    t0: float = 100000.0
    run_in: float = 10.0             # flight line extends this far past the scene
    noise_bounds: tuple = (0.005, 0.05)

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        lo, hi = self.noise_bounds
        if self.noise_fraction != 0 and not lo <= self.noise_fraction <= hi:
            raise ValueError(f"noise_fraction {self.noise_fraction} outside [{lo}, {hi}]")
        fr = (self.sparse_fraction, self.systematic_fraction, self.complex_fraction)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"noise type fractions must be >= 0 and sum to 1, got {fr}")
        if self.prf <= 0 or self.c <= 0:
            raise ValueError("prf and c must be positive")
        if self.relief < 0 or self.ceiling <= self.relief:
            raise ValueError("need 0 <= relief < ceiling")

    @property
    def r_max(self):
        return compute_rmax(self.prf, self.c)

    @property
    def area(self):
        return self.extent ** 2

    def rng(self, stream):
        seq = np.random.SeedSequence(self.seed).spawn(len(_STREAMS))[_STREAMS.index(stream)]
        return np.random.default_rng(seq)


def terrain_height(cfg, x, y):
    """Smooth terrain in ``[0, relief]``; fixed by the terrain RNG stream."""
    rng = cfg.rng("terrain")
    phase = rng.uniform(0, 2 * np.pi, size=4)
    wave = rng.uniform(0.6, 1.4, size=2) * 2 * np.pi / max(cfg.extent, 1.0)
    s = (np.sin(wave[0] * x + phase[0]) * np.cos(wave[1] * y + phase[1])
         + np.sin(0.5 * wave[1] * x + phase[2] + 0.5 * wave[0] * y + phase[3])) / 2.0
    return cfg.relief * (0.5 + 0.5 * s)


def generate_trajectory(cfg):
    """Straight line along x at y = extent / 2, uniform sample spacing."""
    dt = 1.0 / cfg.traj_rate
    length = cfg.extent + 2 * cfg.run_in
    n = int(np.ceil(length / cfg.speed / dt)) + 1
    t = cfg.t0 + dt * np.arange(n)
    x = -cfg.run_in + cfg.speed * (t - cfg.t0)
    y = np.full(n, cfg.extent / 2.0)
    z = np.full(n, float(cfg.altitude))
    return Trajectory(np.stack([t, x, y, z], axis=1))


def _scan_sample(cfg, traj, x):
    """Trajectory index whose sensor is overhead of along-track position ``x``."""
    dt = 1.0 / cfg.traj_rate
    idx = np.rint((x + cfg.run_in) / cfg.speed / dt).astype(np.int64)
    return np.clip(idx, 0, len(traj) - 1)


def _gps_times(cfg, traj, x, rng):
    idx = _scan_sample(cfg, traj, x)
    dt = 1.0 / cfg.traj_rate
    return traj.times[idx] + rng.uniform(-0.25 * dt, 0.25 * dt, size=len(idx))


def _clip_xy(xyz, cfg):
    # half-open footprint [0, extent) so a grid anchored at 0 holds every point
    top = np.nextafter(cfg.extent, 0.0)
    xyz[:, :2] = np.clip(xyz[:, :2], 0.0, top)


def _make_points(xyz, gps, label, intensity, nret=None, rnum=None):
    arr = np.zeros(len(gps), dtype=POINT_DTYPE)
    arr["x"], arr["y"], arr["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    arr["gps_time"] = gps
    arr["label"] = label
    arr["intensity"] = np.clip(intensity, 0, 65535)
    arr["num_returns"] = 1 if nret is None else nret
    arr["return_number"] = 1 if rnum is None else rnum
    return arr


@dataclass(frozen=True)
class SceneObject:
    kind: str            # "tree" or "building"
    center: tuple        # x, y of footprint centre
    base: float          # terrain height under the centre
    height: float
    size: tuple          # tree: (crown radius,); building: (half x, half y)

    def bbox(self, pad=0.0):
        if self.kind == "tree":
            r = self.size[0]
            hx = hy = r
        else:
            hx, hy = self.size
        cx, cy = self.center
        return (np.array([cx - hx - pad, cy - hy - pad, self.base - pad]),
                np.array([cx + hx + pad, cy + hy + pad, self.base + self.height + pad]))


def place_objects(cfg):
    rng = cfg.rng("objects")
    objs = []
    margin = 3.0
    for _ in range(cfg.n_trees):
        cx, cy = rng.uniform(margin, cfg.extent - margin, size=2)
        base = float(terrain_height(cfg, cx, cy))
        objs.append(SceneObject("tree", (cx, cy), base, float(rng.uniform(6, 14)),
                                (float(rng.uniform(1.5, 3.5)),)))
    for _ in range(cfg.n_buildings):
        hx, hy = rng.uniform(3, 6, size=2)
        cx = rng.uniform(hx + 1, max(cfg.extent - hx - 1, hx + 1.01))
        cy = rng.uniform(hy + 1, max(cfg.extent - hy - 1, hy + 1.01))
        base = float(terrain_height(cfg, cx, cy))
        objs.append(SceneObject("building", (cx, cy), base, float(rng.uniform(4, 10)),
                                (float(hx), float(hy))))
    return objs


def _sample_object(obj, n, rng):
    cx, cy = obj.center
    if obj.kind == "tree":
        r = obj.size[0]
        n_trunk = n // 5
        n_crown = n - n_trunk
        trunk_h = obj.height - 2 * r
        trunk = np.column_stack([
            cx + rng.normal(0, 0.1, n_trunk), cy + rng.normal(0, 0.1, n_trunk),
            obj.base + rng.uniform(0, max(trunk_h, 0.5), n_trunk)])
        u = rng.normal(size=(n_crown, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        rad = r * rng.uniform(0.6, 1.0, n_crown) ** (1 / 3)
        crown_c = np.array([cx, cy, obj.base + obj.height - r])
        crown = crown_c + u * rad[:, None] * np.array([1.0, 1.0, 1.0])
        xyz = np.vstack([trunk, crown])
        nret = np.concatenate([np.ones(n_trunk, int), rng.integers(1, 4, n_crown)])
    else:
        hx, hy = obj.size
        n_roof = int(round(0.7 * n))
        n_wall = n - n_roof
        roof = np.column_stack([cx + rng.uniform(-hx, hx, n_roof), cy + rng.uniform(-hy, hy, n_roof),
                                np.full(n_roof, obj.base + obj.height)])
        side = rng.integers(0, 4, n_wall)
        t = rng.uniform(-1, 1, n_wall)
        wx = np.where(side == 0, -hx, np.where(side == 1, hx, t * hx))
        wy = np.where(side == 2, -hy, np.where(side == 3, hy, t * hy))
        walls = np.column_stack([cx + wx, cy + wy, obj.base + rng.uniform(0, obj.height, n_wall)])
        xyz = np.vstack([roof, walls])
        nret = np.ones(n, int)
    rnum = np.minimum(rng.integers(1, 4, n), nret)
    return xyz, nret, rnum


def generate_terrain_and_objects(cfg, traj=None):
    """Non-noise points: ``round(ground_density * area)`` ground returns plus
    ``round(object_density * area)`` returns spread over the objects."""
    traj = traj if traj is not None else generate_trajectory(cfg)
    rng = cfg.rng("ground")
    n_ground = int(round(cfg.ground_density * cfg.area))
    gx, gy = rng.uniform(0, cfg.extent, size=(2, n_ground))
    gz = terrain_height(cfg, gx, gy)
    parts = [_make_points(np.column_stack([gx, gy, gz]), _gps_times(cfg, traj, gx, rng), 0,
                          rng.normal(1800, 150, n_ground))]
    n_obj = int(round(cfg.object_density * cfg.area))
    objs = place_objects(cfg) if n_obj > 0 else []
    if objs:
        rng_obj = cfg.rng("object_points")
        sizes = np.array([o.height * (o.size[0] if o.kind == "tree" else sum(o.size)) for o in objs])
        counts = np.floor(n_obj * sizes / sizes.sum()).astype(int)
        counts[: n_obj - counts.sum()] += 1
        for obj, n in zip(objs, counts):
            if n == 0:
                continue
            xyz, nret, rnum = _sample_object(obj, n, rng_obj)
            _clip_xy(xyz, cfg)
            base_i = 900 if obj.kind == "tree" else 2400
            parts.append(_make_points(xyz, _gps_times(cfg, traj, xyz[:, 0], rng_obj), 0,
                                      rng_obj.normal(base_i, 120, n), nret, rnum))
    return PointCloud(np.concatenate(parts))


def noise_budget(cfg, n_clean):
    """Per-kind noise counts so noise makes up ``noise_fraction`` of the final cloud."""
    f = cfg.noise_fraction
    total = int(round(f * n_clean / (1.0 - f))) if f > 0 else 0
    sparse = int(round(total * cfg.sparse_fraction))
    systematic = int(round(total * cfg.systematic_fraction))
    return {"sparse": sparse, "systematic": systematic,
            "complex": max(total - sparse - systematic, 0)}


def _clean_count(cloud):
    return int((cloud.labels == 0).sum())


def _object_boxes(cfg, pad):
    if cfg.object_density <= 0:
        return []
    return [o.bbox(pad) for o in place_objects(cfg)]


def inject_sparse_noise(cloud, cfg, traj):
    n = noise_budget(cfg, _clean_count(cloud))["sparse"]
    if n == 0:
        return cloud
    rng = cfg.rng("sparse")
    boxes = _object_boxes(cfg, cfg.clearance)
    out = np.empty((0, 3))
    for _ in range(1000):
        m = 2 * (n - len(out)) + 16
        x, y = rng.uniform(0, cfg.extent, size=(2, m))
        floor = terrain_height(cfg, x, y) + cfg.clearance
        z = rng.uniform(floor, cfg.ceiling)
        keep = floor < cfg.ceiling
        for lo, hi in boxes:
            inside = np.all((np.column_stack([x, y, z]) >= lo) & (np.column_stack([x, y, z]) <= hi), axis=1)
            keep &= ~inside
        out = np.vstack([out, np.column_stack([x, y, z])[keep]])
        if len(out) >= n:
            break
    out = out[:n]
    pts = _make_points(out, _gps_times(cfg, traj, out[:, 0], rng), 1, rng.uniform(20, 400, len(out)))
    return PointCloud(np.concatenate([cloud.points, pts]))


def inject_systematic_noise(cloud, cfg, traj):
    """Returns within ``band`` of a zone-transition range ``k * r_max``.

    The offset from the transition follows a triangular density peaking at
    the transition itself.
    """
    n = noise_budget(cfg, _clean_count(cloud))["systematic"]
    if n == 0:
        return cloud
    rng = cfg.rng("systematic")
    r_max = cfg.r_max
    chunks = []
    have = 0
    for _ in range(1000):
        m = 2 * (n - have) + 16
        x, y = rng.uniform(0, cfg.extent, size=(2, m))
        idx = _scan_sample(cfg, traj, x)
        sensor = traj.positions[idx]
        h2 = (x - sensor[:, 0]) ** 2 + (y - sensor[:, 1]) ** 2
        ground = terrain_height(cfg, x, y)
        # zone boundaries whose sheet crosses the air column at this x, y
        k_lo = np.ceil(np.sqrt(h2 + (sensor[:, 2] - cfg.ceiling) ** 2) / r_max)
        k_hi = np.floor(np.sqrt(h2 + (sensor[:, 2] - ground) ** 2) / r_max)
        ok = k_hi >= k_lo
        k = np.where(ok, k_lo + np.floor(rng.uniform(0, 1, m) * (k_hi - k_lo + 1)), 1)
        offset = cfg.band * (1.0 - np.sqrt(rng.uniform(0, 1, m))) * rng.choice([-1.0, 1.0], m)
        rng_r = k * r_max + offset
        z = sensor[:, 2] - np.sqrt(np.maximum(rng_r ** 2 - h2, 0.0))
        ok &= (z >= ground) & (z <= cfg.ceiling) & (rng_r ** 2 > h2)
        gps = traj.times[idx] + rng.uniform(-0.25, 0.25, m) / cfg.traj_rate
        chunks.append((np.column_stack([x, y, z])[ok], gps[ok]))
        have += int(ok.sum())
        if have >= n:
            break
    if have == 0:
        log.warning("no zone transition crosses the scene volume; no systematic noise injected")
        return cloud
    xyz = np.vstack([c[0] for c in chunks])[:n]
    gps = np.concatenate([c[1] for c in chunks])[:n]
    pts = _make_points(xyz, gps, 1, rng.uniform(20, 300, len(gps)))
    return PointCloud(np.concatenate([cloud.points, pts]))


def inject_complex_noise(cloud, cfg, traj):
    """Gaussian clusters seeded next to tree crowns and roofs."""
    n = noise_budget(cfg, _clean_count(cloud))["complex"]
    if n == 0:
        return cloud
    rng = cfg.rng("complex")
    objs = place_objects(cfg) if cfg.object_density > 0 else []
    per_cluster = 25
    n_clusters = max(1, int(np.ceil(n / per_cluster)))
    centers = np.empty((n_clusters, 3))
    for i in range(n_clusters):
        if objs:
            obj = objs[rng.integers(len(objs))]
            cx, cy = obj.center
            reach = obj.size[0] if obj.kind == "tree" else max(obj.size)
            ang = rng.uniform(0, 2 * np.pi)
            top = obj.base + obj.height
            centers[i] = (cx + reach * np.cos(ang), cy + reach * np.sin(ang),
                          top - rng.uniform(0, 0.5 * obj.height))
        else:
            cx, cy = rng.uniform(0, cfg.extent, 2)
            centers[i] = (cx, cy, terrain_height(cfg, cx, cy) + rng.uniform(2, 10))
    which = np.arange(n) % n_clusters
    sigma = rng.uniform(0.6, 1.4, n_clusters)[which]
    xyz = centers[which] + rng.normal(size=(n, 3)) * sigma[:, None]
    _clip_xy(xyz, cfg)
    ground = terrain_height(cfg, xyz[:, 0], xyz[:, 1])
    xyz[:, 2] = np.clip(xyz[:, 2], ground, cfg.ceiling)
    pts = _make_points(xyz, _gps_times(cfg, traj, xyz[:, 0], rng), 1, rng.uniform(50, 600, n))
    return PointCloud(np.concatenate([cloud.points, pts]))


def simulate_scene(cfg):
    traj = generate_trajectory(cfg)
    cloud = generate_terrain_and_objects(cfg, traj)
    for inject in (inject_sparse_noise, inject_systematic_noise, inject_complex_noise):
        cloud = inject(cloud, cfg, traj)
    return cloud, traj


def scene_config_for(index, base, seed):
    """Per-scene config for a multi-scene dataset.

    Flight altitude varies per scene so the transition sheet crosses the scene
    at a different height each time.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    band_height = rng.uniform(8.0, 26.0)
    k = np.floor(base.altitude / base.r_max)
    altitude = float(k * base.r_max + band_height)
    return replace(base, seed=int(rng.integers(2 ** 31)), altitude=altitude)
