"""Point and trajectory containers, file formats, and GPS-time partitioning.

Clouds are columnar: one numpy structured array with a field per attribute.
"""

import csv
import logging
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

POINT_DTYPE = np.dtype([
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("gps_time", "<f8"),
    ("intensity", "<f4"), ("prior_prob", "<f4"),
    ("return_number", "u1"), ("num_returns", "u1"), ("label", "u1"),
])
# on-disk record: same fields plus one pad byte, packed
NPC_RECORD_DTYPE = np.dtype({
    "names": ["x", "y", "z", "gps_time", "intensity", "prior_prob",
              "return_number", "num_returns", "label", "pad"],
    "formats": ["<f8", "<f8", "<f8", "<f8", "<f4", "<f4", "u1", "u1", "u1", "u1"],
    "offsets": [0, 8, 16, 24, 32, 36, 40, 41, 42, 43],
    "itemsize": 44,
})
NPC_MAGIC = b"NPC1"
CSV_FIELDS = ["x", "y", "z", "gps_time", "intensity", "return_number",
              "num_returns", "label", "prior_prob"]
TRAJ_FIELDS = ["gps_time", "x", "y", "z"]


class FormatError(ValueError):
    """Malformed or unsupported point/trajectory file."""


class PointRecord(NamedTuple):
    x: float
    y: float
    z: float
    gps_time: float
    intensity: float = 0.0
    return_number: int = 1
    num_returns: int = 1
    label: int = 0
    prior_prob: float = 0.0


def validate_points(points):
    if np.any(points["label"] > 1):
        bad = int(np.flatnonzero(points["label"] > 1)[0])
        raise ValueError(f"point {bad}: label {points['label'][bad]} outside {{0, 1}}")
    rn, nr = points["return_number"], points["num_returns"]
    if np.any(rn < 1) or np.any(nr < rn):
        bad = int(np.flatnonzero((rn < 1) | (nr < rn))[0])
        raise ValueError(f"point {bad}: need num_returns >= return_number >= 1, "
                         f"got {nr[bad]} / {rn[bad]}")
    pp = points["prior_prob"]
    if np.any((pp < 0) | (pp > 1)):
        bad = int(np.flatnonzero((pp < 0) | (pp > 1))[0])
        raise ValueError(f"point {bad}: prior_prob {pp[bad]} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        if self.points.dtype != POINT_DTYPE:
            raise TypeError(f"points must have POINT_DTYPE, got {self.points.dtype}")
        validate_points(self.points)

    @classmethod
    def from_records(cls, records):
        arr = np.array([tuple(getattr(r, f) for f in POINT_DTYPE.names)
                        for r in records], dtype=POINT_DTYPE)
        return cls(arr)

    @classmethod
    def from_arrays(cls, xyz, gps_time, label=None, intensity=None,
                    return_number=None, num_returns=None, prior_prob=None):
        n = len(gps_time)
        arr = np.zeros(n, dtype=POINT_DTYPE)
        arr["x"], arr["y"], arr["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
        arr["gps_time"] = gps_time
        arr["label"] = 0 if label is None else label
        arr["intensity"] = 0 if intensity is None else intensity
        arr["return_number"] = 1 if return_number is None else return_number
        arr["num_returns"] = 1 if num_returns is None else num_returns
        arr["prior_prob"] = 0 if prior_prob is None else prior_prob
        return cls(arr)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return PointRecord(*(self.points[f][i].item() for f in PointRecord._fields))

    @property
    def xyz(self):
        return np.stack([self.points["x"], self.points["y"], self.points["z"]], axis=1)

    @property
    def bounds(self):
        if len(self.points) == 0:
            raise ValueError("empty cloud has no bounds")
        xyz = self.xyz
        return xyz.min(axis=0), xyz.max(axis=0)

    @property
    def gps_range(self):
        if len(self.points) == 0:
            raise ValueError("empty cloud has no gps range")
        t = self.points["gps_time"]
        return float(t.min()), float(t.max())

    @property
    def labels(self):
        return self.points["label"]

    def with_field(self, name, values):
        arr = self.points.copy()
        arr[name] = values
        return PointCloud(arr)

    def subset(self, mask_or_index):
        return PointCloud(self.points[mask_or_index])

    def concat(self, other):
        return PointCloud(np.concatenate([self.points, other.points]))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sensor positions sorted by GPS time; columns gps_time, x, y, z."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 4:
            raise ValueError(f"trajectory samples must be (N, 4), got {s.shape}")
        if len(s) == 0:
            raise ValueError("trajectory is empty")
        if np.any(np.diff(s[:, 0]) < 0):
            raise ValueError("trajectory gps_time must be nondecreasing")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    @property
    def times(self):
        return self.samples[:, 0]

    @property
    def positions(self):
        return self.samples[:, 1:]

    @property
    def time_span(self):
        return float(self.times[0]), float(self.times[-1])


def _detect_format(path, fmt):
    if fmt is not None:
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "npc"


def write_cloud(cloud, path, fmt=None):
    fmt = _detect_format(path, fmt)
    pts = cloud.points
    if len(pts) == 0:
        raise ValueError("refusing to write an empty cloud")
    if fmt == "npc":
        rec = np.zeros(len(pts), dtype=NPC_RECORD_DTYPE)
        for name in POINT_DTYPE.names:
            rec[name] = pts[name]
        with open(path, "wb") as fh:
            fh.write(NPC_MAGIC)
            fh.write(struct.pack("<Q", len(pts)))
            fh.write(rec.tobytes())
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            cols = [pts[f] for f in CSV_FIELDS]
            for row in zip(*cols):
                writer.writerow([repr(float(v)) if isinstance(v, np.floating) else int(v)
                                 for v in row])
    else:
        raise FormatError(f"unknown cloud format {fmt!r}")


def read_cloud(path, fmt=None):
    fmt = _detect_format(path, fmt)
    if fmt == "npc":
        pts = _read_npc(path)
    elif fmt == "csv":
        pts = _read_csv(path)
    else:
        raise FormatError(f"unknown cloud format {fmt!r}")
    if len(pts) == 0:
        raise FormatError(f"{path}: no points")
    try:
        return PointCloud(pts)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _read_npc(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != NPC_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {NPC_MAGIC!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<Q", data, 4)
    body = len(data) - 12
    if body != count * NPC_RECORD_DTYPE.itemsize:
        raise FormatError(f"{path}: header says {count} points but body holds "
                          f"{body} bytes (offset 12)")
    rec = np.frombuffer(data, dtype=NPC_RECORD_DTYPE, count=count, offset=12)
    pts = np.zeros(count, dtype=POINT_DTYPE)
    for name in POINT_DTYPE.names:
        pts[name] = rec[name]
    return pts


def _read_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file")
        if [h.strip() for h in header] != CSV_FIELDS:
            raise FormatError(f"{path}:1: expected header {','.join(CSV_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_FIELDS):
                raise FormatError(f"{path}:{lineno}: expected {len(CSV_FIELDS)} fields, got {len(row)}")
            try:
                rows.append(tuple(float(v) for v in row))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no points")
    raw = np.array(rows, dtype=np.float64)
    pts = np.zeros(len(raw), dtype=POINT_DTYPE)
    for i, name in enumerate(CSV_FIELDS):
        col = raw[:, i]
        if name in ("return_number", "num_returns", "label"):
            if np.any(col != np.round(col)) or np.any(col < 0) or np.any(col > 255):
                bad = int(np.flatnonzero((col != np.round(col)) | (col < 0) | (col > 255))[0])
                raise FormatError(f"{path}:{bad + 2}: {name} must be a small integer")
        pts[name] = col
    return pts


def write_trajectory(traj, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJ_FIELDS)
        for row in traj.samples:
            writer.writerow([repr(float(v)) for v in row])


def read_trajectory(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAJ_FIELDS:
            raise FormatError(f"{path}:1: expected header {','.join(TRAJ_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: trajectory has no samples")
    samples = np.array(rows)
    if np.any(np.diff(samples[:, 0]) < 0):
        log.warning("%s: trajectory not sorted by gps_time; sorting", path)
        samples = samples[np.argsort(samples[:, 0], kind="stable")]
    return Trajectory(samples)


def split_by_gps_time(cloud, k):
    """Partition into ``k`` sub-clouds over equal-width GPS time intervals.

    The last interval is closed on the right.  A zero-width time span puts
    every point in the first bucket.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(cloud):
        raise ValueError(f"cannot split {len(cloud)} points into {k} parts")
    t = cloud.points["gps_time"]
    t0, t1 = t.min(), t.max()
    if t1 == t0:
        bucket = np.zeros(len(t), dtype=np.int64)
    else:
        bucket = np.floor((t - t0) / (t1 - t0) * k).astype(np.int64)
        bucket = np.clip(bucket, 0, k - 1)
    return [PointCloud(cloud.points[bucket == i]) for i in range(k)]
