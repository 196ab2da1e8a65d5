"""Sequence runner: preprocessing, scan-to-scan odometry and scan-to-map refinement.

Odometry runs on the calling thread and hands each frame to a mapping thread
through a bounded queue. Both stages consume frames strictly in order, so the
output does not depend on scheduling or on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import MalformedFile, NoOverlap
from .evaluation import ate_rmse
from .features import FeatureSet, select_features
from .ingest import Trajectory, read_kitti_scan, read_trajectory, write_trajectory
from .mapping import Mapper, MapFrame
from .matching import vote_histogram
from .odometry import Odometry, OdometryFrame, deskew

log = logging.getLogger("lidarodom")

STAGES = ("preprocessing", "odometry", "mapping")


class DataError(MalformedFile):
    """The dataset directory is missing or inconsistent."""


@dataclass
class Dataset:
    root: Path
    scans: list[Path]
    timestamps: np.ndarray
    truth: Trajectory | None

    @classmethod
    def open(
        cls,
        root: str | Path,
        scan_period: float = 0.1,
        max_frames: int | None = None,
        poses: str | Path | None = None,
    ) -> Dataset:
        root = Path(root)
        vdir = root / "velodyne"
        if not vdir.is_dir():
            raise DataError(f"{root}: no velodyne/ directory")
        scans = sorted(vdir.glob("*.bin"))
        if not scans:
            raise DataError(f"{vdir}: no .bin scans")
        times_file = root / "times.txt"
        if times_file.is_file():
            try:
                stamps = np.loadtxt(times_file, ndmin=1, dtype=float)
            except ValueError as exc:
                raise DataError(f"{times_file}: {exc}") from None
            if len(stamps) < len(scans):
                raise DataError(f"{times_file}: {len(stamps)} stamps for {len(scans)} scans")
            stamps = stamps[: len(scans)]
            if np.any(np.diff(stamps) <= 0):
                raise DataError(f"{times_file}: timestamps must increase")
        else:
            stamps = np.arange(len(scans)) * scan_period
        truth = None
        poses_file = Path(poses) if poses else root / "poses.txt"
        if poses and not poses_file.is_file():
            raise DataError(f"{poses_file}: no such ground-truth file")
        if poses_file.is_file():
            truth = read_trajectory(poses_file, "kitti")
        if max_frames:
            scans, stamps = scans[:max_frames], stamps[:max_frames]
        return cls(root, scans, stamps, truth)

    def __len__(self) -> int:
        return len(self.scans)


@dataclass
class RunResult:
    odometry: Trajectory
    mapped: Trajectory | None
    timings: dict[str, list[float]]
    diagnostics: list[dict]
    summary: dict
    files: dict[str, Path] = field(default_factory=dict)

    @property
    def final(self) -> Trajectory:
        return self.mapped if self.mapped is not None else self.odometry


def timing_rows(timings: dict[str, list[float]]) -> list[tuple[str, int, float, float, float]]:
    rows = []
    for stage in STAGES:
        ms = np.asarray(timings.get(stage, []), dtype=float) * 1e3
        if len(ms):
            rows.append((stage, len(ms), float(ms.mean()), float(np.median(ms)), float(np.percentile(ms, 95))))
        else:
            rows.append((stage, 0, float("nan"), float("nan"), float("nan")))
    return rows


def timing_table(timings: dict[str, list[float]]) -> str:
    head = ("stage", "frames", "mean_ms", "median_ms", "p95_ms")
    body = [(s, str(n), f"{a:.2f}", f"{b:.2f}", f"{c:.2f}") for s, n, a, b, c in timing_rows(timings)]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]

    def fmt(r):
        return "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths)))

    return "\n".join([fmt(head), *map(fmt, body)]) + "\n"


def timing_csv(timings: dict[str, list[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "frames", "mean_ms", "median_ms", "p95_ms"])
    for s, n, a, b, c in timing_rows(timings):
        w.writerow([s, n, f"{a:.4f}", f"{b:.4f}", f"{c:.4f}"])
    return buf.getvalue()


def _odometry_record(k: int, stamp: float, frame: OdometryFrame) -> dict:
    rec = {"frame": k, "timestamp": float(stamp), "flagged": frame.flagged, "note": frame.note}
    rec["passes"] = [
        {
            "initial": p.initial, "kept": p.kept, "removed": p.removed,
            "dropped_match": p.dropped_match, "dropped_anchor": p.dropped_anchor, "blocks": p.blocks,
        }
        for p in frame.passes
    ]
    rec["votes"] = vote_histogram(frame.passes[0].votes) if frame.passes else []
    return rec


def _mapping_record(frame: MapFrame) -> dict:
    return {
        "initial": frame.initial, "kept": frame.kept, "dropped_match": frame.dropped_match,
        "dropped_anchor": frame.dropped_anchor, "flagged": frame.flagged, "note": frame.note,
        "votes": vote_histogram(frame.votes),
    }


class _MappingStage(threading.Thread):
    def __init__(self, mapper: Mapper, maxsize: int):
        super().__init__(name="mapping", daemon=True)
        self.mapper = mapper
        self.inbox: queue.Queue = queue.Queue(maxsize=maxsize)
        self.frames: list[MapFrame] = []
        self.seconds: list[float] = []
        self.error: BaseException | None = None

    def run(self) -> None:
        while True:
            item = self.inbox.get()
            if item is None:
                return
            if self.error is not None:
                continue  # keep draining so the producer never blocks
            features, T_odom = item
            try:
                t0 = time.perf_counter()
                self.frames.append(self.mapper.process(features, T_odom))
                self.seconds.append(time.perf_counter() - t0)
            except BaseException as exc:  # re-raised on the main thread
                self.error = exc


def _preprocess(path: Path, cfg: RunConfig, k: int, stamp: float, odo: Odometry) -> FeatureSet:
    scan = read_kitti_scan(path, cfg.sensor(), k, float(stamp))
    return select_features(deskew(scan, odo.predict()), cfg.features())


def _ate(estimate: Trajectory, truth: Trajectory) -> dict:
    out = {}
    for align in ("rigid", "none"):
        try:
            rep = ate_rmse(estimate, truth, align)
        except NoOverlap:
            return {}
        out[align] = rep.rmse
    n = min(len(estimate), len(truth))
    out["final_drift"] = float(np.linalg.norm(estimate.poses[n - 1].translation - truth.poses[n - 1].translation))
    out["matched"] = n
    return out


def run_pipeline(cfg: RunConfig, write: bool = True) -> RunResult:
    if cfg.dataset is None:
        raise DataError("no dataset given (dataset.path)")
    data = Dataset.open(cfg.dataset, cfg["sensor.scan_period"], cfg.max_frames, cfg["dataset.poses"] or None)
    log.info("%s: %d frames", data.root, len(data))

    odo = Odometry(cfg.odometry(), workers=cfg.threads)
    stage = None
    if cfg.mapping_enabled:
        stage = _MappingStage(Mapper(cfg.mapping()), cfg["run.queue_size"])
        stage.start()

    timings: dict[str, list[float]] = {"preprocessing": [], "odometry": []}
    diagnostics: list[dict] = []
    odom_poses = []
    try:
        for k, (path, stamp) in enumerate(zip(data.scans, data.timestamps)):
            t0 = time.perf_counter()
            features = _preprocess(path, cfg, k, stamp, odo)
            t1 = time.perf_counter()
            frame = odo.process(features)
            t2 = time.perf_counter()
            timings["preprocessing"].append(t1 - t0)
            timings["odometry"].append(t2 - t1)
            odom_poses.append(frame.global_pose)
            diagnostics.append(_odometry_record(k, stamp, frame))
            if frame.flagged:
                log.warning("frame %d: odometry flagged (%s)", k, frame.note)
            if stage is not None:
                stage.inbox.put((features, frame.global_pose))
    finally:
        if stage is not None:
            stage.inbox.put(None)
            stage.join()
    if stage is not None and stage.error is not None:
        raise stage.error

    odometry = Trajectory(data.timestamps.copy(), tuple(odom_poses))
    mapped = None
    if stage is not None:
        timings["mapping"] = stage.seconds
        mapped = Trajectory(data.timestamps.copy(), tuple(f.pose for f in stage.frames))
        for rec, mf in zip(diagnostics, stage.frames):
            rec["mapping"] = _mapping_record(mf)
            if mf.flagged:
                log.warning("frame %d: mapping flagged (%s)", rec["frame"], mf.note)

    summary: dict = {"frames": len(data), "mapping": stage is not None}
    if data.truth is not None:
        summary["ate_odometry"] = _ate(odometry, data.truth)
        if mapped is not None:
            summary["ate_mapped"] = _ate(mapped, data.truth)
    result = RunResult(odometry, mapped, timings, diagnostics, summary)
    if write:
        _write_outputs(result, cfg, stage.mapper if stage is not None else None)
    return result


def _write_outputs(result: RunResult, cfg: RunConfig, mapper: Mapper | None) -> None:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    files = result.files
    for fmt in ("kitti", "tum"):
        files[f"odometry_{fmt}"] = out / f"odometry_{fmt}.txt"
        write_trajectory(result.odometry, fmt, files[f"odometry_{fmt}"])
        files[f"trajectory_{fmt}"] = out / f"trajectory_{fmt}.txt"
        write_trajectory(result.final, fmt, files[f"trajectory_{fmt}"])
    if mapper is not None and cfg["output.export_map"]:
        files["map_edges"], files["map_planars"] = mapper.map.export_xyz(out)
    files["timing_txt"] = out / "timing.txt"
    files["timing_txt"].write_text(timing_table(result.timings))
    files["timing_csv"] = out / "timing.csv"
    files["timing_csv"].write_text(timing_csv(result.timings))
    if cfg["output.diagnostics"]:
        files["diagnostics"] = out / "diagnostics.jsonl"
        files["diagnostics"].write_text("".join(json.dumps(r) + "\n" for r in result.diagnostics))
    files["config"] = out / "config.ini"
    files["config"].write_text(cfg.to_ini())
    files["summary"] = out / "summary.json"
    files["summary"].write_text(json.dumps(result.summary, indent=2) + "\n")
