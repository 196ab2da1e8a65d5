"""Run configuration: INI file, dataset sensor description and command-line overrides.

Every parameter lives under ``[section] key`` in the file and can be set on the
command line as ``--section.key VALUE``. Later sources win:
built-in defaults, the dataset's ``sensor.ini``, the ``--config`` file, flags.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError
from .features import SelectionParams
from .ingest import SensorConfig, hdl64_elevations
from .mapping import MappingParams
from .odometry import OdometryParams, WeightSchedule


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _elevations(text: str) -> tuple[float, ...]:
    t = text.strip().lower()
    if t == "hdl64":
        return hdl64_elevations()
    return tuple(float(v) for v in t.replace(",", " ").split())


def _fmt_elevations(v: tuple[float, ...]) -> str:
    return ", ".join(repr(float(e)) for e in v)


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    parse: Callable[[str], Any]
    default: Any
    check: str = ""  # "fraction", "length" (> 0), "nonneg" (>= 0), "positive" (>= 1)
    help: str = ""

    @property
    def name(self) -> str:
        return f"{self.section}.{self.key}"

    def render(self, value: Any) -> str:
        if self.parse is _elevations:
            return _fmt_elevations(value)
        if isinstance(value, bool):
            return "true" if value else "false"
        return str(value)


_S, _F, _O, _M = SensorConfig(), SelectionParams(), OdometryParams(), MappingParams()

OPTIONS: tuple[Option, ...] = (
    Option("dataset", "path", str, "", help="directory with velodyne/ and times.txt"),
    Option("dataset", "poses", str, "", help="ground-truth KITTI poses (default: <path>/poses.txt)"),
    Option("dataset", "max_frames", int, 0, "nonneg", "stop after this many frames (0 = all)"),
    Option("sensor", "elevations", _elevations, _S.elevations_deg, help="beam elevations in degrees or 'hdl64'"),
    Option("sensor", "elevation_tolerance", float, _S.elevation_tolerance_deg, "length"),
    Option("sensor", "min_range", float, _S.min_range, "length"),
    Option("sensor", "max_range", float, _S.max_range, "length"),
    Option("sensor", "clockwise", _bool, _S.clockwise),
    Option("sensor", "scan_period", float, _S.scan_period, "length"),
    Option("features", "m", int, _F.m, "nonneg", "edge features per subregion"),
    Option("features", "n", int, _F.n, "nonneg", "planar features per subregion"),
    Option("features", "k", int, _F.k, "nonneg", "sharpest points skipped"),
    Option("features", "l", int, _F.l, "nonneg", "flattest points skipped"),
    Option("features", "subregions", int, _F.subregions, "positive"),
    Option("features", "r_t", float, _F.r_t, "nonneg", "smoothness threshold between edges and planes"),
    Option("features", "half_window", int, _F.half_window, "positive"),
    Option("features", "sigma_disjoint", float, _F.sigma_disjoint, "length"),
    Option("features", "conspicuous", _bool, False, help="pick the most extreme points (k = l = 0)"),
    Option("odometry", "sigma", float, _O.sigma, "length"),
    Option("odometry", "eta", float, _O.eta, "fraction"),
    Option("odometry", "x", float, _O.x, "fraction"),
    Option("odometry", "subgraph_size", int, _O.subgraph_size, "positive"),
    Option("odometry", "max_match_dist", float, _O.max_match_dist, "length"),
    Option("odometry", "lambda_frac", float, _O.schedule.fraction, "fraction"),
    Option("odometry", "alpha", float, _O.schedule.alpha, "length"),
    Option("odometry", "passes", int, _O.passes, "positive"),
    Option("odometry", "max_passes", int, _O.max_passes, "positive"),
    Option("odometry", "iterations", int, _O.solver.max_iterations, "positive"),
    Option("odometry", "channel_window", int, _O.channel_window, "positive"),
    Option("odometry", "graph_filter", _bool, _O.graph_filter),
    Option("odometry", "weighting", _bool, _O.weighting),
    Option("mapping", "enabled", _bool, True),
    Option("mapping", "edge_leaf", float, _M.edge_leaf, "length"),
    Option("mapping", "planar_leaf", float, _M.planar_leaf, "length"),
    Option("mapping", "radius", float, _M.radius, "length"),
    Option("mapping", "neighbors", int, _M.neighbors, "positive"),
    Option("mapping", "max_neighbor_dist", float, _M.max_neighbor_dist, "length"),
    Option("mapping", "sigma", float, _M.sigma, "length"),
    Option("mapping", "eta", float, _M.eta, "fraction"),
    Option("mapping", "x", float, _M.x, "fraction"),
    Option("mapping", "subgraph_size", int, _M.subgraph_size, "positive"),
    Option("mapping", "line_tolerance", float, _M.line_tolerance, "length"),
    Option("mapping", "plane_tolerance", float, _M.plane_tolerance, "length"),
    Option("mapping", "passes", int, _M.passes, "positive"),
    Option("mapping", "max_passes", int, _M.max_passes, "positive"),
    Option("mapping", "iterations", int, _M.solver.max_iterations, "positive"),
    Option("mapping", "graph_filter", _bool, _M.graph_filter),
    Option("run", "threads", int, 1, "positive", "workers for nearest-neighbor queries"),
    Option("run", "queue_size", int, 4, "positive", "frames buffered between odometry and mapping"),
    Option("output", "dir", str, "out"),
    Option("output", "export_map", _bool, True),
    Option("output", "diagnostics", _bool, True),
)

OPTION_BY_NAME = {o.name: o for o in OPTIONS}


def _check(opt: Option, value: Any) -> None:
    bad = (
        (opt.check == "fraction" and not 0.0 <= value <= 1.0)
        or (opt.check == "length" and not value > 0)
        or (opt.check == "nonneg" and value < 0)
        or (opt.check == "positive" and value < 1)
    )
    if bad:
        rule = {"fraction": "in [0, 1]", "length": "> 0", "nonneg": ">= 0", "positive": ">= 1"}[opt.check]
        raise ConfigError(f"{opt.name} = {value!r} must be {rule}")


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {o.name: o.default for o in OPTIONS})

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    @property
    def dataset(self) -> Path | None:
        p = self.values["dataset.path"]
        return Path(p) if p else None

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output.dir"])

    @property
    def threads(self) -> int:
        return self.values["run.threads"]

    @property
    def max_frames(self) -> int | None:
        return self.values["dataset.max_frames"] or None

    @property
    def mapping_enabled(self) -> bool:
        return self.values["mapping.enabled"]

    def sensor(self) -> SensorConfig:
        v = self.values
        return SensorConfig(
            v["sensor.elevations"], v["sensor.elevation_tolerance"], v["sensor.min_range"],
            v["sensor.max_range"], v["sensor.clockwise"], v["sensor.scan_period"],
        )

    def features(self) -> SelectionParams:
        v = self.values
        p = SelectionParams(
            v["features.m"], v["features.n"], v["features.k"], v["features.l"], v["features.subregions"],
            v["features.r_t"], v["features.half_window"], v["features.sigma_disjoint"],
        )
        return p.conspicuous() if v["features.conspicuous"] else p

    def odometry(self) -> OdometryParams:
        v = self.values
        return OdometryParams(
            sigma=v["odometry.sigma"], eta=v["odometry.eta"], x=v["odometry.x"],
            subgraph_size=v["odometry.subgraph_size"], max_match_dist=v["odometry.max_match_dist"],
            passes=v["odometry.passes"], max_passes=v["odometry.max_passes"],
            solver=replace(_O.solver, max_iterations=v["odometry.iterations"]),
            schedule=WeightSchedule(v["odometry.lambda_frac"], v["odometry.alpha"]),
            graph_filter=v["odometry.graph_filter"], weighting=v["odometry.weighting"],
            channel_window=v["odometry.channel_window"],
        )

    def mapping(self) -> MappingParams:
        v = self.values
        return MappingParams(
            edge_leaf=v["mapping.edge_leaf"], planar_leaf=v["mapping.planar_leaf"], radius=v["mapping.radius"],
            neighbors=v["mapping.neighbors"], max_neighbor_dist=v["mapping.max_neighbor_dist"],
            sigma=v["mapping.sigma"], eta=v["mapping.eta"], x=v["mapping.x"],
            subgraph_size=v["mapping.subgraph_size"], line_tolerance=v["mapping.line_tolerance"],
            plane_tolerance=v["mapping.plane_tolerance"], passes=v["mapping.passes"],
            max_passes=v["mapping.max_passes"],
            solver=replace(_M.solver, max_iterations=v["mapping.iterations"]),
            graph_filter=v["mapping.graph_filter"],
        )

    def with_values(self, **updates: Any) -> RunConfig:
        """Copy with ``section__key=value`` updates, validated."""
        raw = {k.replace("__", "."): v for k, v in updates.items()}
        return merge(self, raw, parsed=True).validate()

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for o in OPTIONS:
            if not parser.has_section(o.section):
                parser.add_section(o.section)
            parser.set(o.section, o.key, o.render(self.values[o.name]))
        lines: list[str] = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {val}" for k, val in parser.items(section)]
            lines.append("")
        return "\n".join(lines)

    def validate(self) -> RunConfig:
        for o in OPTIONS:
            _check(o, self.values[o.name])
        v = self.values
        if v["sensor.min_range"] >= v["sensor.max_range"]:
            raise ConfigError("sensor.min_range must be below sensor.max_range")
        if v["odometry.max_passes"] < v["odometry.passes"] or v["mapping.max_passes"] < v["mapping.passes"]:
            raise ConfigError("max_passes must be >= passes")
        try:
            self.sensor()
            self.features()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def merge(cfg: RunConfig, raw: dict[str, Any], parsed: bool = False) -> RunConfig:
    values = dict(cfg.values)
    for name, text in raw.items():
        opt = OPTION_BY_NAME.get(name)
        if opt is None:
            raise ConfigError(f"unknown option {name!r}")
        if parsed and not isinstance(text, str):
            values[name] = text
            continue
        try:
            values[name] = opt.parse(text)
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    return RunConfig(values)


def read_ini(path: str | Path, sections: tuple[str, ...] | None = None) -> dict[str, str]:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if sections is not None and section not in sections:
            continue
        for key, value in parser.items(section):
            out[f"{section}.{key}"] = value
    return out


def load_config(
    config_path: str | Path | None = None, overrides: dict[str, str] | None = None
) -> RunConfig:
    """Resolve defaults, the dataset's sensor.ini, the config file and overrides, in that order."""
    file_values = read_ini(config_path) if config_path else {}
    flag_values = dict(overrides or {})
    dataset = flag_values.get("dataset.path", file_values.get("dataset.path", ""))
    cfg = RunConfig()
    if dataset:
        sensor_ini = Path(dataset) / "sensor.ini"
        if sensor_ini.is_file():
            cfg = merge(cfg, read_ini(sensor_ini, ("sensor",)))
    cfg = merge(cfg, file_values)
    return merge(cfg, flag_values).validate()
