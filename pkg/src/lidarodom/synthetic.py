"""Ray-cast LiDAR simulator and synthetic datasets for tests and demos.

The scene is a closed room with solid boxes and vertical pillars. A spinning
multi-beam sensor fires one column of beams per azimuth step while it moves,
so sweeps carry the same motion distortion a real rotating LiDAR produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .features import FeatureSet, SelectionParams, select_features
from .geometry import PoseSE3, compose
from .ingest import Scan, SensorConfig, Trajectory, scan_from_records, write_kitti_scan, write_trajectory


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class Pillar:
    center: tuple[float, float]
    radius: float
    z_lo: float
    z_hi: float


@dataclass(frozen=True)
class Scene:
    room_lo: tuple[float, float, float]
    room_hi: tuple[float, float, float]
    boxes: tuple[Box, ...] = ()
    pillars: tuple[Pillar, ...] = ()

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Distance along each unit ray to the first surface (inf on a miss)."""
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        lo, hi = np.asarray(self.room_lo), np.asarray(self.room_hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            # leaving the room from the inside
            t_far = np.where(d > 0, (hi - o) * inv, np.where(d < 0, (lo - o) * inv, np.inf))
            best = t_far.min(axis=1)
            for b in self.boxes:
                t1 = (np.asarray(b.lo) - o) * inv
                t2 = (np.asarray(b.hi) - o) * inv
                t_in = np.nanmax(np.minimum(t1, t2), axis=1)
                t_out = np.nanmin(np.maximum(t1, t2), axis=1)
                hit = (t_in <= t_out) & (t_in > 1e-9)
                best = np.where(hit & (t_in < best), t_in, best)
            for p in self.pillars:
                ox, oy = o[:, 0] - p.center[0], o[:, 1] - p.center[1]
                a = d[:, 0] ** 2 + d[:, 1] ** 2
                bq = 2 * (ox * d[:, 0] + oy * d[:, 1])
                c = ox**2 + oy**2 - p.radius**2
                disc = bq**2 - 4 * a * c
                t = (-bq - np.sqrt(np.maximum(disc, 0))) / (2 * a)
                z = o[:, 2] + t * d[:, 2]
                hit = (disc > 0) & (a > 1e-12) & (t > 1e-9) & (z >= p.z_lo) & (z <= p.z_hi)
                best = np.where(hit & (t < best), t, best)
        return best


def default_scene() -> Scene:
    """A 44 x 32 m hall with crates and pillars around an open centre."""
    boxes = (
        Box((9.0, -3.0, -1.8), (11.0, 1.0, 0.6)),
        Box((-12.0, 6.0, -1.8), (-9.0, 8.5, 1.5)),
        Box((-4.0, -13.0, -1.8), (1.5, -11.0, 0.2)),
        Box((5.0, 9.0, -1.8), (8.0, 12.0, 2.5)),
        Box((-16.0, -9.0, -1.8), (-13.5, -4.0, 0.9)),
        Box((14.0, 8.0, -1.8), (16.0, 10.0, 3.0)),
        Box((-2.0, 10.0, -1.8), (0.5, 11.0, 1.1)),
        Box((16.0, -12.0, -1.8), (19.0, -8.0, 1.4)),
    )
    pillars = (
        Pillar((8.0, 6.0), 0.4, -1.8, 5.0),
        Pillar((-8.0, -6.0), 0.5, -1.8, 5.0),
        Pillar((-8.5, 1.0), 0.3, -1.8, 5.0),
        Pillar((3.0, -8.5), 0.35, -1.8, 5.0),
        Pillar((12.0, -6.0), 0.6, -1.8, 5.0),
    )
    return Scene((-22.0, -16.0, -1.8), (22.0, 16.0, 5.0), boxes, pillars)


@dataclass(frozen=True)
class SyntheticLidar:
    channels: int = 16
    lowest_deg: float = -15.0
    highest_deg: float = 15.0
    azimuth_step_deg: float = 0.4
    start_azimuth_deg: float = 180.0
    range_noise: float = 0.0
    clockwise: bool = True

    def sensor_config(self) -> SensorConfig:
        return SensorConfig.uniform(
            self.channels, self.lowest_deg, self.highest_deg, clockwise=self.clockwise
        )

    @property
    def columns(self) -> int:
        return int(round(360.0 / self.azimuth_step_deg))

    def beam_directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions in the sensor frame, in firing order, plus their sweep fraction."""
        elev = np.radians(np.asarray(self.sensor_config().elevations_deg))
        cols = np.arange(self.columns)
        sign = -1.0 if self.clockwise else 1.0
        az = math.radians(self.start_azimuth_deg) + sign * np.radians(self.azimuth_step_deg) * cols
        az_g, el_g = np.meshgrid(az, elev, indexing="ij")  # column-major firing order
        dirs = np.stack(
            [np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], axis=-1
        ).reshape(-1, 3)
        frac = np.repeat(cols / self.columns, len(elev))
        return dirs, frac

    def sweep(
        self,
        scene: Scene,
        start: PoseSE3,
        motion: PoseSE3,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Simulate one sweep as ``(N, 4)`` x y z intensity records in firing order.

        ``start`` is the world pose at the beginning of the sweep and
        ``motion`` the pose at its end relative to the start.
        """
        dirs, frac = self.beam_directions()
        rots = Rotation.from_matrix(start.R) * Rotation.from_rotvec(frac[:, None] * motion.rotvec())
        origins = start.apply(frac[:, None] * motion.translation)
        ranges = scene.raycast(origins, rots.apply(dirs))
        ok = np.isfinite(ranges)
        r = ranges[ok]
        if self.range_noise > 0:
            rng = rng or np.random.default_rng(0)
            r = r + rng.normal(0, self.range_noise, len(r))
        pts = dirs[ok] * r[:, None]
        intensity = np.clip(1.0 - r / 50.0, 0.0, 1.0)
        return np.hstack([pts, intensity[:, None]])


def loop_poses(
    n_frames: int, radius: float = 5.0, yaw_amplitude_deg: float = 25.0, arc: float = 1.0
) -> list[PoseSE3]:
    """Sweep-end poses along a closed circle that starts and ends at rest.

    Returns ``n_frames + 1`` poses; pose 0 is where the first sweep begins.
    ``arc < 1`` stops early, covering only that share of the loop.
    """
    poses = []
    for k in range(n_frames + 1):
        u = arc * k / n_frames
        phase = 2 * math.pi * (u - math.sin(2 * math.pi * u) / (2 * math.pi))
        pos = [radius * math.sin(phase), radius * (1 - math.cos(phase)), 0.15 * math.sin(2 * phase)]
        yaw = math.radians(yaw_amplitude_deg) * math.sin(phase)
        pitch = math.radians(1.5) * math.sin(3 * phase)
        R = Rotation.from_euler("zyx", [yaw, pitch, 0.0]).as_matrix()
        poses.append(PoseSE3.from_matrix(np.block([[R, np.array(pos)[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]])))
    return poses


@dataclass
class SyntheticSequence:
    scans: list[np.ndarray]  # raw records per frame
    truth: Trajectory  # sweep-end poses, first frame at identity
    config: SensorConfig
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))


def simulate_sequence(
    n_frames: int = 50,
    scene: Scene | None = None,
    lidar: SyntheticLidar | None = None,
    radius: float = 5.0,
    seed: int = 0,
    scan_period: float = 0.1,
    arc: float = 1.0,
) -> SyntheticSequence:
    """Simulate a loop; ground truth is expressed relative to the first sweep-end pose."""
    scene = scene or default_scene()
    lidar = lidar or SyntheticLidar(range_noise=0.01)
    rng = np.random.default_rng(seed)
    world = loop_poses(n_frames, radius, arc=arc)
    scans = []
    for k in range(n_frames):
        motion = compose(world[k].inverse(), world[k + 1])
        scans.append(lidar.sweep(scene, world[k], motion, rng))
    origin_inv = world[1].inverse()
    truth = [compose(origin_inv, world[k + 1]) for k in range(n_frames)]
    times = scan_period * np.arange(n_frames)
    return SyntheticSequence(scans, Trajectory(times, truth), lidar.sensor_config(), times)


def write_sequence(seq: SyntheticSequence, root: str | Path) -> Path:
    """Write a KITTI-style layout: velodyne/NNNNNN.bin, times.txt, poses.txt, sensor.ini."""
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(seq.scans):
        write_kitti_scan(root / "velodyne" / f"{k:06d}.bin", rec[:, :3], rec[:, 3])
    (root / "times.txt").write_text("".join(f"{t:.6e}\n" for t in seq.timestamps))
    write_trajectory(seq.truth, "kitti", root / "poses.txt")
    cfg = seq.config
    (root / "sensor.ini").write_text(
        "[sensor]\n"
        f"elevations = {', '.join(repr(float(e)) for e in cfg.elevations_deg)}\n"
        f"elevation_tolerance = {cfg.elevation_tolerance_deg}\n"
        f"min_range = {cfg.min_range}\n"
        f"max_range = {cfg.max_range}\n"
        f"clockwise = {str(cfg.clockwise).lower()}\n"
    )
    return root


# ---------------------------------------------------------------------------
# feature-level registration problems


def structured_scan(seed: int = 0, lidar: SyntheticLidar | None = None) -> Scan:
    """One static sweep of the default hall from a slightly randomized pose."""
    rng = np.random.default_rng(seed)
    lidar = lidar or SyntheticLidar()
    start = PoseSE3.from_rotvec([0, 0, rng.uniform(-math.pi, math.pi)], [rng.uniform(-2, 2), rng.uniform(-2, 2), 0.0])
    records = lidar.sweep(default_scene(), start, PoseSE3.identity(), rng)
    return scan_from_records(records, lidar.sensor_config())


def random_motion(rng: np.random.Generator, max_translation: float = 1.0, max_angle_deg: float = 3.0) -> PoseSE3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t *= rng.uniform(0, max_translation) / np.linalg.norm(t)
    return PoseSE3.from_rotvec(axis * math.radians(rng.uniform(0, max_angle_deg)), t)


def registration_pair(
    T_star: PoseSE3,
    scan: Scan | None = None,
    noise: float = 0.0,
    outlier_fraction: float = 0.0,
    rng: np.random.Generator | None = None,
    params: SelectionParams | None = None,
    outlier_model: str = "uniform",
) -> tuple[FeatureSet, FeatureSet, np.ndarray]:
    """Previous features and the current ones seen from ``T_star``.

    The current set is the previous selection moved by ``T_star``'s inverse, so
    registering it against the previous scan should return ``T_star``. Noise
    perturbs the current features; outliers replace a fraction of them with
    points pushed 0.5-3 m off the structure. Returns (curr, prev, outlier mask)
    with the mask over ``[edges, planars]``.
    """
    rng = rng or np.random.default_rng(0)
    scan = scan if scan is not None else structured_scan()
    prev = select_features(scan, params)
    curr = prev.transformed(T_star.inverse())
    pts = np.vstack([curr.edges, curr.planars])
    is_out = np.zeros(len(pts), dtype=bool)
    if outlier_fraction > 0:
        n_out = int(round(outlier_fraction * len(pts)))
        is_out[rng.choice(len(pts), n_out, replace=False)] = True
        if outlier_model == "uniform":
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            pts[is_out] = rng.uniform(lo, hi, (n_out, 3))
        elif outlier_model == "displaced":
            dirs = rng.normal(size=(n_out, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            pts[is_out] += dirs * rng.uniform(0.5, 3.0, (n_out, 1))
        else:
            raise ValueError(f"unknown outlier model {outlier_model!r}")
    if noise > 0:
        pts = pts + rng.normal(0, noise, pts.shape)
    ne = len(curr.edges)
    curr = FeatureSet(
        pts[:ne], pts[ne:], curr.edge_channel, curr.planar_channel,
        curr.edge_subregion, curr.planar_subregion, n_channels=curr.n_channels,
    )
    return curr, prev, is_out
