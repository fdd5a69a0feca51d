"""Dense voxel grids with a point <-> voxel projection index.

Array axes are (z, y, x): ``D`` runs along z, ``H`` along y, ``W`` along x.
"""

import os
from dataclasses import dataclass, field

import numpy as np

VOID = -1
CHANNELS = ("occ", "mz", "nr", "ins", "r")
DEFAULT_CHANNELS = ("occ", "mz")
SIDECAR_KEYS = ("d", "h", "w", "origin_x", "origin_y", "origin_z", "voxel_size")


@dataclass(frozen=True)
class GridSpec:
    origin: tuple = (0.0, 0.0, 0.0)   # x, y, z of the grid's lower corner
    edge_voxels: int = 64
    voxel_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != 3:
            raise ValueError("origin must have three coordinates")
        if self.edge_voxels < 1 or self.voxel_size <= 0:
            raise ValueError("edge_voxels must be >= 1 and voxel_size > 0")

    @property
    def shape(self):
        return (self.edge_voxels,) * 3

    @property
    def extent(self):
        return self.edge_voxels * self.voxel_size

    def check_depth(self, depth):
        if self.edge_voxels % 2 ** (depth - 1):
            raise ValueError(f"edge {self.edge_voxels} not divisible by 2**(depth-1)")

    def cell_index(self, xyz):
        """Integer (iz, iy, ix) per point and an in-bounds mask."""
        rel = (np.asarray(xyz, dtype=np.float64) - np.array(self.origin)) / self.voxel_size
        ijk = np.floor(rel).astype(np.int64)        # columns x, y, z
        inside = np.all((ijk >= 0) & (ijk < self.edge_voxels), axis=1)
        return ijk[:, ::-1], inside


@dataclass
class FeatureGrid:
    spec: GridSpec
    channels: np.ndarray                  # (C, D, H, W) float32
    channel_names: tuple
    occupancy: np.ndarray                 # (D, H, W) int64 point counts
    point_cell: np.ndarray                # flat voxel id per source point, -1 if outside
    labels: np.ndarray = None             # (D, H, W) int8 in {0, 1, VOID}
    priors: np.ndarray = None             # (D, H, W) float32
    out_of_bounds: int = 0
    _order: np.ndarray = field(default=None, repr=False)

    @property
    def occupied(self):
        return self.occupancy > 0

    def points_in(self, iz, iy, ix):
        """Indices of the source points that fall in one voxel."""
        if self._order is None:
            self._order = np.argsort(self.point_cell, kind="stable")
        e = self.spec.edge_voxels
        cell = (iz * e + iy) * e + ix
        sorted_cells = self.point_cell[self._order]
        lo = np.searchsorted(sorted_cells, cell, side="left")
        hi = np.searchsorted(sorted_cells, cell, side="right")
        return self._order[lo:hi]


def _cell_means(flat, n_cells, values, counts):
    sums = np.bincount(flat, weights=values, minlength=n_cells)
    return np.divide(sums, counts, out=np.zeros(n_cells), where=counts > 0)


def voxelize(cloud, spec, channels=DEFAULT_CHANNELS, mz_mode="grid"):
    """Bin a cloud into a dense feature grid.

    Channels are any of ``occ`` (point count), ``mz`` (mean z), ``nr`` (mean
    number of returns), ``ins`` (mean intensity / 65535) and ``r`` (mean range
    prior).  ``mz_mode="grid"`` maps mean z to ``(z - origin_z) / extent``;
    ``"absolute"`` keeps metres.  Voxel labels take the majority point label
    with ties going to noise; empty voxels are VOID.
    """
    unknown = set(channels) - set(CHANNELS)
    if unknown:
        raise ValueError(f"unknown channels {sorted(unknown)}; choose from {CHANNELS}")
    if mz_mode not in ("grid", "absolute"):
        raise ValueError(f"mz_mode must be grid or absolute, got {mz_mode!r}")
    pts = cloud.points
    ijk, inside = spec.cell_index(cloud.xyz)
    n_in = int(inside.sum())
    if n_in == 0:
        raise ValueError("no points fall inside the grid")
    e = spec.edge_voxels
    n_cells = e ** 3
    point_cell = np.full(len(pts), -1, dtype=np.int64)
    point_cell[inside] = (ijk[inside, 0] * e + ijk[inside, 1]) * e + ijk[inside, 2]
    flat = point_cell[inside]
    counts = np.bincount(flat, minlength=n_cells).astype(np.int64)

    def mean_of(field_values):
        return _cell_means(flat, n_cells, np.asarray(field_values, dtype=np.float64)[inside], counts)

    feats = []
    for name in channels:
        if name == "occ":
            feats.append(counts.astype(np.float64))
        elif name == "mz":
            mz = mean_of(pts["z"])
            if mz_mode == "grid":
                mz = np.where(counts > 0, (mz - spec.origin[2]) / spec.extent, 0.0)
            feats.append(mz)
        elif name == "nr":
            feats.append(mean_of(pts["num_returns"]))
        elif name == "ins":
            feats.append(mean_of(pts["intensity"]) / 65535.0)
        elif name == "r":
            feats.append(mean_of(pts["prior_prob"]))
    shape = spec.shape
    noise = np.bincount(flat, weights=pts["label"][inside].astype(np.float64), minlength=n_cells)
    labels = np.full(n_cells, VOID, dtype=np.int8)
    occ = counts > 0
    labels[occ] = (2 * noise[occ] >= counts[occ]).astype(np.int8)
    priors = mean_of(pts["prior_prob"])
    return FeatureGrid(
        spec=spec,
        channels=np.stack(feats).reshape((len(feats),) + shape).astype(np.float32),
        channel_names=tuple(channels),
        occupancy=counts.reshape(shape),
        point_cell=point_cell,
        labels=labels.reshape(shape),
        priors=priors.reshape(shape).astype(np.float32),
        out_of_bounds=len(pts) - n_in,
    )


def tile_origins(cloud, edge_voxels, voxel_size, anchor=None):
    """Lower corners of the non-overlapping tiles that cover the cloud bounds."""
    lo, hi = cloud.bounds
    tile = edge_voxels * voxel_size
    if anchor is None:
        anchor = np.floor(lo / voxel_size) * voxel_size
    anchor = np.asarray(anchor, dtype=np.float64)
    first = np.floor((lo - anchor) / tile).astype(int)
    last = np.floor((hi - anchor) / tile).astype(int)
    origins = []
    for iz in range(first[2], last[2] + 1):
        for iy in range(first[1], last[1] + 1):
            for ix in range(first[0], last[0] + 1):
                origins.append(tuple(float(v) for v in anchor + tile * np.array([ix, iy, iz])))
    return origins


def tile_cloud(cloud, edge_voxels=64, voxel_size=1.0, channels=DEFAULT_CHANNELS,
               anchor=None, mz_mode="grid"):
    """Voxelize every tile that holds at least one point.

    Tiles beyond the cloud's extent are simply empty (zero) cells.
    """
    grids = []
    for origin in tile_origins(cloud, edge_voxels, voxel_size, anchor):
        spec = GridSpec(origin, edge_voxels, voxel_size)
        _, inside = spec.cell_index(cloud.xyz)
        if inside.any():
            grids.append(voxelize(cloud, spec, channels, mz_mode))
    return grids


def project_labels(grid, voxel_pred):
    """Per-point labels copied from each point's voxel; points outside get 0."""
    voxel_pred = np.asarray(voxel_pred)
    if voxel_pred.shape != grid.spec.shape:
        raise ValueError(f"prediction shape {voxel_pred.shape} != grid {grid.spec.shape}")
    flat = voxel_pred.reshape(-1)
    out = np.zeros(len(grid.point_cell), dtype=np.uint8)
    inside = grid.point_cell >= 0
    out[inside] = flat[grid.point_cell[inside]]
    return out


def _box_sum(a):
    """Sum over each voxel's 3x3x3 neighbourhood (zero outside the grid)."""
    p = np.pad(a, 1)
    d, h, w = a.shape
    out = np.zeros(a.shape, dtype=np.float64)
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                out += p[kd:kd + d, kh:kh + h, kw:kw + w]
    return out


def vpp_refine(pred_conf, occupancy=None, tau=0.5, mode="promote"):
    """Relabel voxels from their neighbours' noise confidence.

    The smoothed score of an occupied voxel is the mean noise confidence over
    the occupied voxels of its 3x3x3 neighbourhood (itself included).

    Args:
        pred_conf: (D, H, W, 2) per-voxel class scores summing to 1.
        occupancy: (D, H, W) counts or mask; only occupied voxels vote and
            only occupied voxels are relabelled.  Defaults to all occupied.
        tau: threshold on the smoothed noise score.
        mode: ``promote`` keeps every voxel the network already calls noise
            and adds those whose smoothed score exceeds ``tau``; ``smooth``
            labels noise iff the smoothed score exceeds ``tau``.

    Returns:
        (D, H, W) int8 labels.
    """
    pred_conf = np.asarray(pred_conf, dtype=np.float64)
    if pred_conf.ndim != 4 or pred_conf.shape[-1] != 2:
        raise ValueError(f"expected (D, H, W, 2) scores, got {pred_conf.shape}")
    if not np.allclose(pred_conf.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("scores must sum to 1 per voxel")
    if mode not in ("promote", "smooth"):
        raise ValueError(f"mode must be promote or smooth, got {mode!r}")
    noise = pred_conf[..., 1]
    if occupancy is None:
        mask = np.ones(noise.shape)
    else:
        mask = (np.asarray(occupancy) > 0).astype(np.float64)
        if mask.shape != noise.shape:
            raise ValueError(f"occupancy shape {mask.shape} != scores {noise.shape}")
    smoothed = smooth_noise_score(noise, mask)
    labels = smoothed > tau
    if mode == "promote":
        labels |= noise >= pred_conf[..., 0]
    return labels.astype(np.int8)


def smooth_noise_score(noise, mask):
    """Mean of ``noise`` over occupied 3x3x3 neighbours; unoccupied cells keep their own value."""
    votes = _box_sum(noise * mask)
    weight = _box_sum(mask)
    return np.where(mask > 0, votes / np.maximum(weight, 1.0), noise)


def _sidecar_path(prefix):
    return f"{prefix}.grid"


def write_sidecar(prefix, shape, spec):
    d, h, w = shape
    values = (d, h, w, *spec.origin, spec.voxel_size)
    with open(_sidecar_path(prefix), "w") as fh:
        for key, value in zip(SIDECAR_KEYS, values):
            fh.write(f"{key} = {value!r}\n")


def read_sidecar(prefix):
    fields = {}
    with open(_sidecar_path(prefix)) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in SIDECAR_KEYS:
                raise ValueError(f"{_sidecar_path(prefix)}:{lineno}: bad sidecar line {line!r}")
            fields[key] = float(value)
    missing = [k for k in SIDECAR_KEYS if k not in fields]
    if missing:
        raise ValueError(f"{_sidecar_path(prefix)}: missing {missing}")
    shape = tuple(int(fields[k]) for k in ("d", "h", "w"))
    if len(set(shape)) != 1:
        raise ValueError(f"{_sidecar_path(prefix)}: only cubic grids supported, got {shape}")
    spec = GridSpec((fields["origin_x"], fields["origin_y"], fields["origin_z"]),
                    shape[0], fields["voxel_size"])
    return shape, spec


def write_array(path, arr):
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def read_array(path, shape):
    data = np.fromfile(path, dtype="<f4")
    n = int(np.prod(shape))
    if data.size % n:
        raise ValueError(f"{path}: {data.size} floats is not a multiple of grid size {n}")
    return data.reshape((data.size // n,) + tuple(shape))


def save_grid(grid, prefix):
    """Write ``prefix.features.f32``, ``.labels.f32``, ``.priors.f32`` and ``prefix.grid``."""
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    write_sidecar(prefix, grid.spec.shape, grid.spec)
    write_array(f"{prefix}.features.f32", grid.channels)
    write_array(f"{prefix}.occupancy.f32", grid.occupancy)
    if grid.labels is not None:
        write_array(f"{prefix}.labels.f32", grid.labels)
    if grid.priors is not None:
        write_array(f"{prefix}.priors.f32", grid.priors)


def load_grid(prefix, channel_names=DEFAULT_CHANNELS):
    """Read a grid written by :func:`save_grid`; the point projection is not stored."""
    shape, spec = read_sidecar(prefix)
    feats = read_array(f"{prefix}.features.f32", shape)
    occ = read_array(f"{prefix}.occupancy.f32", shape)[0].astype(np.int64)
    labels = priors = None
    if os.path.exists(f"{prefix}.labels.f32"):
        labels = read_array(f"{prefix}.labels.f32", shape)[0].astype(np.int8)
    if os.path.exists(f"{prefix}.priors.f32"):
        priors = read_array(f"{prefix}.priors.f32", shape)[0]
    names = tuple(channel_names)[:feats.shape[0]]
    return FeatureGrid(spec, feats, names, occ, np.zeros(0, dtype=np.int64), labels, priors)
