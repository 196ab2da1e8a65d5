"""Command-line entry point.

Exit status: 0 success, 1 configuration error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import OPTIONS, RunConfig, load_config
from .errors import ConfigError, LidarOdomError, MalformedFile, NoOverlap, ParseError
from .evaluation import ate_rmse
from .features import EDGE, PLANAR, FeatureSet, select_features
from .ingest import read_kitti_scan, read_trajectory
from .matching import KIND_NAMES, TargetIndex, initial_correspondences, vote_and_filter_subgraphs
from .pipeline import run_pipeline, timing_table

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("lidarodom")


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, not argparse's default status 2
    def error(self, message):
        raise ConfigError(message)


def _global_flags() -> argparse.ArgumentParser:
    g = _Parser(add_help=False)
    g.add_argument("--config", help="INI file with [section] key = value entries")
    g.add_argument("--output-dir", help="where artifacts are written (output.dir)")
    g.add_argument("--threads", type=int, help="nearest-neighbor query workers (run.threads)")
    g.add_argument("--no-graph-filter", action="store_true", help="skip consistency voting in both stages")
    g.add_argument("--conspicuous-features", action="store_true", help="select the most extreme points")
    g.add_argument("--no-weighting", action="store_true", help="unit weights for every odometry residual")
    g.add_argument("-v", "--verbose", action="count", default=0)
    opts = g.add_argument_group("parameters", "every configuration key, as --section.key VALUE")
    for o in OPTIONS:
        opts.add_argument(f"--{o.name}", dest=f"opt:{o.name}", metavar="VALUE", help=o.help or None)
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    p = _Parser(prog="lidarodom", description="LiDAR odometry and mapping with consistency-voted matching.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="run the full pipeline on a dataset")
    run.add_argument("dataset", nargs="?", help="directory with velodyne/*.bin (dataset.path)")

    ev = sub.add_parser("eval", parents=[common], help="ATE between two trajectory files")
    ev.add_argument("estimate")
    ev.add_argument("truth")
    ev.add_argument("--format", choices=("kitti", "tum"), default="kitti")
    ev.add_argument("--align", choices=("rigid", "none"), default="rigid")
    ev.add_argument("--max-dt", type=float, default=0.02, help="TUM association window in seconds")

    ft = sub.add_parser("features", parents=[common], help="dump the selected features of one scan")
    ft.add_argument("scan")

    mt = sub.add_parser("match", parents=[common], help="dump correspondences and votes for a scan pair")
    mt.add_argument("current")
    mt.add_argument("previous")

    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic sequence with ground truth")
    sim.add_argument("out")
    sim.add_argument("--frames", type=int, default=50)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--arc", type=float, default=1.0, help="share of the loop to travel")
    return p


def config_from_args(args: argparse.Namespace, dataset: str | None = None) -> RunConfig:
    overrides: dict[str, str] = {}
    for o in OPTIONS:
        v = getattr(args, f"opt:{o.name}", None)
        if v is not None:
            overrides[o.name] = v
    if dataset is not None and "dataset.path" not in overrides:
        overrides["dataset.path"] = dataset
    if args.output_dir is not None:
        overrides["output.dir"] = args.output_dir
    if args.threads is not None:
        overrides["run.threads"] = str(args.threads)
    if args.no_graph_filter:
        overrides["odometry.graph_filter"] = overrides["mapping.graph_filter"] = "false"
    if args.conspicuous_features:
        overrides["features.conspicuous"] = "true"
    if args.no_weighting:
        overrides["odometry.weighting"] = "false"
    return load_config(args.config, overrides)


def _dataset_of(scan: Path) -> str | None:
    # a scan inside <root>/velodyne/ picks up <root>/sensor.ini
    root = scan.resolve().parent.parent
    return str(root) if (root / "sensor.ini").is_file() else None


def _features(path: str, cfg: RunConfig) -> FeatureSet:
    return select_features(read_kitti_scan(path, cfg.sensor()), cfg.features())


def cmd_run(args, out) -> int:
    cfg = config_from_args(args, args.dataset)
    result = run_pipeline(cfg)
    out.write(timing_table(result.timings))
    for key in ("ate_odometry", "ate_mapped"):
        if key in result.summary and result.summary[key]:
            ate = result.summary[key]
            out.write(f"{key}: rigid {ate['rigid']:.4f} m, unaligned {ate['none']:.4f} m\n")
    out.write(f"wrote {len(result.files)} files to {cfg.output_dir}\n")
    return EXIT_OK


def cmd_eval(args, out) -> int:
    est = read_trajectory(args.estimate, args.format)
    truth = read_trajectory(args.truth, args.format)
    by = "timestamp" if args.format == "tum" else "index"
    rep = ate_rmse(est, truth, args.align, by=by, max_dt=args.max_dt)
    out.write(f"matched {rep.matched}\nalign {args.align}\nrmse {rep.rmse:.6f}\n")
    return EXIT_OK


def cmd_features(args, out) -> int:
    cfg = config_from_args(args, _dataset_of(Path(args.scan)))
    fs = _features(args.scan, cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    dest = cfg.output_dir / f"features_{Path(args.scan).stem}.csv"
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "x", "y", "z", "channel"])
        for kind in (EDGE, PLANAR):
            for p, c in zip(fs.points(kind), fs.channels(kind)):
                w.writerow([KIND_NAMES[kind], *(f"{v:.6f}" for v in p), int(c)])
    out.write(f"edges {len(fs.edges)}\nplanars {len(fs.planars)}\nwrote {dest}\n")
    return EXIT_OK


def cmd_match(args, out) -> int:
    cfg = config_from_args(args, _dataset_of(Path(args.current)))
    curr, prev = _features(args.current, cfg), _features(args.previous, cfg)
    p = cfg.odometry()
    corrs, dropped = initial_correspondences(curr, TargetIndex(prev, cfg.threads), None, p.max_match_dist)
    if p.graph_filter:
        _, table = vote_and_filter_subgraphs(corrs, p.sigma, p.eta, p.x, p.subgraph_size)
        votes, kept = table.votes, table.kept
    else:
        votes, kept = np.zeros(len(corrs), dtype=np.int64), np.ones(len(corrs), dtype=bool)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    dest = cfg.output_dir / f"match_{Path(args.current).stem}_{Path(args.previous).stem}.csv"
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "feature", "sx", "sy", "sz", "tx", "ty", "tz", "votes", "kept"])
        for i in range(len(corrs)):
            w.writerow(
                [KIND_NAMES[int(corrs.kind[i])], int(corrs.feature_index[i])]
                + [f"{v:.6f}" for v in (*corrs.source[i], *corrs.target[i])]
                + [int(votes[i]), int(kept[i])]
            )
    out.write(
        f"candidates {len(corrs)}\nunmatched {dropped}\nkept {int(kept.sum())}\nwrote {dest}\n"
    )
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    from .synthetic import simulate_sequence, write_sequence

    if args.frames < 2:
        raise ConfigError("--frames must be >= 2")
    if not 0 < args.arc <= 1:
        raise ConfigError("--arc must be in (0, 1]")
    seq = simulate_sequence(args.frames, seed=args.seed, arc=args.arc)
    root = write_sequence(seq, args.out)
    out.write(f"wrote {args.frames} frames to {root}\n")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "features": cmd_features, "match": cmd_match, "simulate": cmd_simulate}


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"lidarodom: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"lidarodom: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MalformedFile, ParseError, NoOverlap, OSError) as exc:
        print(f"lidarodom: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (LidarOdomError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"lidarodom: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
