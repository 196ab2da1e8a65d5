"""Scan and trajectory I/O.

KITTI velodyne files are packed little-endian float32 records ``x y z
intensity``. The HDL-64 stores no ring index, so each return is assigned to
the beam whose elevation is nearest, and its intra-sweep time is recovered
from the azimuth swept since the first retained return.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

from .errors import MalformedFile, ParseError
from .geometry import PoseSE3, matrix_to_quat

TrajectoryFormat = Literal["kitti", "tum"]


def hdl64_elevations() -> tuple[float, ...]:
    """Nominal HDL-64E beam elevations in degrees, ascending."""
    upper = [2.0 - i / 3.0 for i in range(32)]
    lower = [-8.0 - 5.0 / 6.0 - 0.5 * i for i in range(32)]
    return tuple(sorted(upper + lower))


@dataclass(frozen=True)
class SensorConfig:
    elevations_deg: tuple[float, ...] = field(default_factory=hdl64_elevations)
    elevation_tolerance_deg: float = 0.2
    min_range: float = 1.0
    max_range: float = 120.0
    # Velodyne heads spin clockwise seen from above
    clockwise: bool = True
    scan_period: float = 0.1

    def __post_init__(self):
        elev = tuple(float(e) for e in self.elevations_deg)
        if not elev:
            raise ValueError("beam elevation table is empty")
        if any(b <= a for a, b in zip(elev, elev[1:])):
            raise ValueError("beam elevations must be strictly ascending")
        object.__setattr__(self, "elevations_deg", elev)
        if not 0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")

    @property
    def channels(self) -> int:
        return len(self.elevations_deg)

    @classmethod
    def uniform(cls, channels: int, lowest_deg: float, highest_deg: float, **kw) -> SensorConfig:
        return cls(tuple(np.linspace(lowest_deg, highest_deg, channels).tolist()), **kw)


@dataclass(frozen=True)
class LidarPoint:
    x: float
    y: float
    z: float
    intensity: float
    channel: int
    rel_time: float

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True, eq=False)
class Scan:
    """Points sorted by channel, then by sweep time within each channel.

    ``channel_offsets[c]:channel_offsets[c + 1]`` is the slice of channel ``c``.
    """

    points: np.ndarray
    intensity: np.ndarray
    channel: np.ndarray
    rel_time: np.ndarray
    n_channels: int
    scan_index: int = 0
    timestamp: float = 0.0
    dropped_range: int = 0
    dropped_beam: int = 0
    channel_offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        offsets = np.searchsorted(self.channel, np.arange(self.n_channels + 1), side="left")
        object.__setattr__(self, "channel_offsets", offsets)
        for name in ("points", "intensity", "channel", "rel_time", "channel_offsets"):
            getattr(self, name).flags.writeable = False

    @classmethod
    def from_arrays(
        cls,
        points: np.ndarray,
        channel: np.ndarray,
        rel_time: np.ndarray,
        n_channels: int,
        intensity: np.ndarray | None = None,
        **meta,
    ) -> Scan:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        channel = np.asarray(channel, dtype=np.int64)
        rel_time = np.asarray(rel_time, dtype=float)
        if intensity is None:
            intensity = np.zeros(len(points))
        if len(channel) and (channel.min() < 0 or channel.max() >= n_channels):
            raise ValueError("channel index out of range")
        order = np.lexsort((rel_time, channel))
        return cls(
            points[order].copy(),
            np.asarray(intensity, dtype=float)[order].copy(),
            channel[order].copy(),
            rel_time[order].copy(),
            n_channels,
            **meta,
        )

    def __len__(self) -> int:
        return len(self.points)

    def channel_slice(self, c: int) -> slice:
        return slice(int(self.channel_offsets[c]), int(self.channel_offsets[c + 1]))

    def channel_points(self, c: int) -> np.ndarray:
        return self.points[self.channel_slice(c)]

    def point(self, i: int) -> LidarPoint:
        x, y, z = self.points[i]
        return LidarPoint(
            float(x), float(y), float(z), float(self.intensity[i]), int(self.channel[i]),
            float(self.rel_time[i]),
        )

    def __iter__(self) -> Iterator[LidarPoint]:
        return (self.point(i) for i in range(len(self)))

    def with_points(self, points: np.ndarray) -> Scan:
        """Same scan with replaced coordinates (ordering is kept as is)."""
        return Scan(
            np.asarray(points, dtype=float).copy(), self.intensity, self.channel, self.rel_time,
            self.n_channels, self.scan_index, self.timestamp, self.dropped_range,
            self.dropped_beam,
        )


def sweep_fraction(points: np.ndarray, start_azimuth: float, clockwise: bool = True) -> np.ndarray:
    az = np.arctan2(points[:, 1], points[:, 0])
    swept = (start_azimuth - az) if clockwise else (az - start_azimuth)
    frac = np.mod(swept, 2 * math.pi) / (2 * math.pi)
    # mod can round up to exactly 1.0 for tiny negative sweeps
    return np.where(frac >= 1.0, 0.0, frac)


def scan_from_records(
    records: np.ndarray, cfg: SensorConfig, scan_index: int = 0, timestamp: float = 0.0
) -> Scan:
    """Build a Scan from an ``(N, 4)`` array of ``x y z intensity`` rows."""
    records = np.asarray(records, dtype=float).reshape(-1, 4)
    if not np.all(np.isfinite(records)):
        bad = int(np.argmax(~np.all(np.isfinite(records), axis=1)))
        raise MalformedFile(f"non-finite value in record {bad}")
    xyz = records[:, :3]
    rng = np.linalg.norm(xyz, axis=1)
    in_range = (rng >= cfg.min_range) & (rng <= cfg.max_range)
    dropped_range = int(np.count_nonzero(~in_range))
    xyz, inten, rng = xyz[in_range], records[in_range, 3], rng[in_range]

    elev = np.degrees(np.arcsin(np.clip(xyz[:, 2] / np.maximum(rng, 1e-12), -1.0, 1.0)))
    table = np.asarray(cfg.elevations_deg)
    idx = np.clip(np.searchsorted(table, elev), 1, max(len(table) - 1, 1))
    if len(table) == 1:
        channel = np.zeros(len(elev), dtype=np.int64)
    else:
        lo, hi = table[idx - 1], table[idx]
        channel = np.where(np.abs(elev - lo) <= np.abs(hi - elev), idx - 1, idx)
    known = np.abs(elev - table[channel]) <= cfg.elevation_tolerance_deg
    dropped_beam = int(np.count_nonzero(~known))
    xyz, inten, channel = xyz[known], inten[known], channel[known]

    if len(xyz):
        start = math.atan2(xyz[0, 1], xyz[0, 0])
        rel_time = sweep_fraction(xyz, start, cfg.clockwise)
    else:
        rel_time = np.zeros(0)
    return Scan.from_arrays(
        xyz, channel, rel_time, cfg.channels, inten,
        scan_index=scan_index, timestamp=timestamp,
        dropped_range=dropped_range, dropped_beam=dropped_beam,
    )


def read_kitti_scan(
    path: str | Path, cfg: SensorConfig | None = None, scan_index: int = 0, timestamp: float = 0.0
) -> Scan:
    cfg = cfg or SensorConfig()
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedFile(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(float)
    return scan_from_records(records, cfg, scan_index, timestamp)


def write_kitti_scan(path: str | Path, points: np.ndarray, intensity: np.ndarray | None = None):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(len(points))
    rec = np.hstack([points, np.asarray(intensity, dtype=float).reshape(-1, 1)])
    Path(path).write_bytes(rec.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple[PoseSE3, ...]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        ts.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    @classmethod
    def from_poses(cls, poses: Sequence[PoseSE3], timestamps: Sequence[float] | None = None):
        if timestamps is None:
            timestamps = np.arange(len(poses), dtype=float)
        return cls(np.asarray(timestamps, dtype=float), tuple(poses))

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])


def _fmt(x: float) -> str:
    x = float(x) + 0.0  # folds -0.0
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def format_pose(pose: PoseSE3, fmt: TrajectoryFormat, timestamp: float = 0.0) -> str:
    if fmt == "kitti":
        return " ".join(_fmt(v) for v in pose.matrix()[:3, :4].reshape(-1))
    if fmt == "tum":
        w, x, y, z = pose.rotation
        vals = [timestamp, *pose.translation, x, y, z, w]
        return " ".join(_fmt(v) for v in vals)
    raise ValueError(f"unknown trajectory format {fmt!r}")


def write_trajectory(traj: Trajectory, fmt: TrajectoryFormat, path: str | Path) -> None:
    lines = [format_pose(p, fmt, t) for t, p in zip(traj.timestamps, traj.poses)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def read_trajectory(path: str | Path, fmt: TrajectoryFormat) -> Trajectory:
    if fmt not in ("kitti", "tum"):
        raise ValueError(f"unknown trajectory format {fmt!r}")
    poses: list[PoseSE3] = []
    stamps: list[float] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                vals = [float(v) for v in text.replace(",", " ").split()]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if fmt == "kitti":
                if len(vals) != 12:
                    raise ParseError(f"expected 12 values, got {len(vals)}", lineno)
                M = np.array(vals).reshape(3, 4)
                if not np.all(np.isfinite(M)):
                    raise ParseError("non-finite value", lineno)
                R = M[:, :3]
                if abs(np.linalg.det(R)) < 1e-6:
                    raise ParseError("rotation block is singular", lineno)
                poses.append(PoseSE3(matrix_to_quat(_orthonormalize(R)), M[:, 3]))
                stamps.append(float(len(stamps)))
            else:
                if len(vals) != 8:
                    raise ParseError(f"expected 8 values, got {len(vals)}", lineno)
                t, tx, ty, tz, qx, qy, qz, qw = vals
                try:
                    poses.append(PoseSE3([qw, qx, qy, qz], [tx, ty, tz]))
                except ValueError as exc:
                    raise ParseError(str(exc), lineno) from None
                if stamps and t <= stamps[-1]:
                    raise ParseError("timestamps must be strictly increasing", lineno)
                stamps.append(t)
    return Trajectory(np.asarray(stamps), tuple(poses))
