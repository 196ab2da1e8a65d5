"""Scan-to-scan odometry guided by consistency votes.

Each frame runs a few re-association passes: project the current features with
the running estimate, pair them with the previous scan, vote out inconsistent
pairs, weight the best-supported pairs and take LM steps on the weighted
point-to-line / point-to-plane cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateAnchors, UnderConstrained
from .features import EDGE, PLANAR, FeatureSet
from .geometry import (
    LINE_ANCHOR_EPS,
    PLANE_ANCHOR_EPS,
    PoseSE3,
    ResidualBlock,
    SolveReport,
    SolverOptions,
    compose,
    lm_solve,
    pose_error,
)
from .ingest import Scan
from .matching import (
    CorrespondenceSet,
    TargetIndex,
    initial_correspondences,
    vote_and_filter_subgraphs,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# motion compensation


def _per_point_motion(motion: PoseSE3, s: np.ndarray):
    rots = Rotation.from_rotvec(s[:, None] * motion.rotvec()[None, :])
    return rots, s[:, None] * motion.translation[None, :]


def deskew(scan: Scan, motion: PoseSE3) -> Scan:
    """Re-express every point in the sweep-end frame.

    ``motion`` is the sensor pose at the end of the sweep relative to its
    start. A point stamped at fraction ``s`` was observed from the pose
    ``motion.interpolate(s)``.
    """
    if len(scan) == 0:
        return scan
    rots, trans = _per_point_motion(motion, scan.rel_time)
    at_start = rots.apply(scan.points) + trans
    return scan.with_points((at_start - motion.translation) @ motion.R)


def reskew(scan: Scan, motion: PoseSE3) -> Scan:
    """Inverse of :func:`deskew`: put sweep-end points back at their capture poses."""
    if len(scan) == 0:
        return scan
    rots, trans = _per_point_motion(motion, scan.rel_time)
    at_start = scan.points @ motion.R.T + motion.translation
    return scan.with_points(rots.inv().apply(at_start - trans))


# ---------------------------------------------------------------------------
# weights and residuals


@dataclass(frozen=True)
class WeightSchedule:
    fraction: float = 0.2  # share of the vote ordering that gets custom weights
    alpha: float = 2.0

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError("fraction must be in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def vote_order(corrs: CorrespondenceSet) -> np.ndarray:
    """Descending votes; ties broken by (kind, feature index) so list order is irrelevant."""
    return np.lexsort((corrs.feature_index, corrs.kind, -corrs.votes))


def consistency_weights(corrs: CorrespondenceSet, schedule: WeightSchedule) -> np.ndarray:
    """Per-correspondence weights from votes.

    The top ``fraction`` of the vote ordering gets
    ``alpha * (o - o_min) / (o_max - o_min)`` (``alpha`` when all votes are
    equal); everything else keeps weight 1. Top weights may fall below 1 for
    pairs whose votes sit near ``o_min``.
    """
    n = len(corrs)
    w = np.ones(n)
    if n == 0:
        return w
    votes = corrs.votes.astype(float)
    o_min, o_max = votes.min(), votes.max()
    order = vote_order(corrs)
    top = order[: int(np.floor(schedule.fraction * n))]
    if o_max == o_min:
        w[top] = schedule.alpha
    else:
        w[top] = schedule.alpha * (votes[top] - o_min) / (o_max - o_min)
    return w


@dataclass
class ResidualBuild:
    blocks: list[ResidualBlock]
    weights: np.ndarray
    dropped: int
    kept_index: np.ndarray  # rows of the input correspondences that produced a block


def _nearest_in_channel(target, kind, c, queries, exclude=None):
    """Nearest pool point in channel ``c``; ``exclude`` holds one pool index per query to skip."""
    n = len(queries)
    best_d = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    entry = target.channel_trees[kind].get(int(c))
    if entry is None or n == 0:
        return best_d, best_i
    tree, members = entry
    d, i = tree.query(queries, 1 if exclude is None else 2)
    g = members[i]
    if exclude is None:
        return d[:, 0], g[:, 0]
    skip_first = g[:, 0] == exclude
    keep = ~skip_first
    best_d[keep], best_i[keep] = d[keep, 0], g[keep, 0]
    if d.shape[1] > 1:
        best_d[skip_first], best_i[skip_first] = d[skip_first, 1], g[skip_first, 1]
    return best_d, best_i


def build_residuals(
    kept: CorrespondenceSet,
    target: TargetIndex,
    pose: PoseSE3,
    schedule: WeightSchedule | None = None,
    channel_window: int = 2,
    anchor_max_dist: float = 10.0,
) -> ResidualBuild:
    """Residual blocks for the kept correspondences.

    Edge pairs use the matched target plus the nearest edge from another
    channel within ``channel_window``. Planar pairs use the matched target,
    the next nearest planar point of the same channel, and the nearest planar
    point from another nearby channel. Anchors are searched around the
    feature projected by ``pose``. ``schedule=None`` gives unit weights.
    """
    weights = consistency_weights(kept, schedule) if schedule else np.ones(len(kept))
    blocks: list[ResidualBlock] = []
    rows: list[int] = []
    dropped = 0
    projected = pose.apply(kept.source) if len(kept) else np.zeros((0, 3))
    for kind in (EDGE, PLANAR):
        pool = target.pool(kind)
        chans = target.pool_channels(kind)
        sel = np.flatnonzero(kept.kind == kind)
        if not len(sel):
            continue
        tgt_idx = kept.target_index[sel]
        tgt_ch = chans[tgt_idx]
        anchors_ok = np.zeros(len(sel), dtype=bool)
        second = np.full(len(sel), -1, dtype=np.int64)
        third = np.full(len(sel), -1, dtype=np.int64)
        for c in np.unique(tgt_ch):
            local = np.flatnonzero(tgt_ch == c)
            q = projected[sel[local]]
            # nearest point from a different, nearby channel
            cross_d = np.full(len(local), np.inf)
            cross_i = np.full(len(local), -1, dtype=np.int64)
            for dc in range(-channel_window, channel_window + 1):
                if dc == 0:
                    continue
                d, i = _nearest_in_channel(target, kind, c + dc, q)
                better = d < cross_d
                cross_d[better], cross_i[better] = d[better], i[better]
            cross_ok = cross_d <= anchor_max_dist
            if kind == EDGE:
                second[local] = cross_i
                anchors_ok[local] = cross_ok
            else:
                # same-channel neighbor other than the matched target
                same_d, same_i = _nearest_in_channel(target, kind, c, q, exclude=tgt_idx[local])
                second[local] = same_i
                third[local] = cross_i
                anchors_ok[local] = cross_ok & (same_d <= anchor_max_dist)
        for row, ok in enumerate(anchors_ok):
            if not ok:
                dropped += 1
                continue
            r = int(sel[row])
            a = pool[tgt_idx[row]]
            if kind == EDGE:
                b = pool[second[row]]
                if np.linalg.norm(a - b) <= LINE_ANCHOR_EPS:
                    dropped += 1
                    continue
                anchors = np.vstack([a, b])
                rk = "point_to_line"
            else:
                b, c3 = pool[second[row]], pool[third[row]]
                if np.linalg.norm(np.cross(a - b, a - c3)) <= PLANE_ANCHOR_EPS:
                    dropped += 1
                    continue
                anchors = np.vstack([a, b, c3])
                rk = "point_to_plane"
            blocks.append(ResidualBlock(rk, kept.source[r], anchors, weights[r]))
            rows.append(r)
    rows_arr = np.asarray(rows, dtype=np.int64)
    return ResidualBuild(blocks, weights[rows_arr] if len(rows_arr) else np.zeros(0), dropped, rows_arr)


# ---------------------------------------------------------------------------
# estimation


@dataclass
class OdometryParams:
    sigma: float = 0.2
    eta: float = 0.9
    x: float = 0.10
    subgraph_size: int = 200
    max_match_dist: float = 5.0
    passes: int = 2  # passes always run
    max_passes: int = 6  # extra passes continue while the pose still moves
    pass_translation_tol: float = 1e-4
    pass_rotation_tol: float = 1e-4
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_step_norm=1.0))
    schedule: WeightSchedule = field(default_factory=WeightSchedule)
    graph_filter: bool = True
    weighting: bool = True
    channel_window: int = 2
    anchor_max_dist: float = 10.0


@dataclass
class PassStats:
    initial: int
    kept: int
    removed: int
    dropped_match: int
    dropped_anchor: int
    blocks: int
    votes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class OdometryFrame:
    relative: PoseSE3
    global_pose: PoseSE3
    report: SolveReport | None
    passes: list[PassStats] = field(default_factory=list)
    flagged: bool = False
    note: str = ""


def estimate_relative(
    curr: FeatureSet,
    prev: FeatureSet | TargetIndex,
    T_init: PoseSE3 | None = None,
    params: OdometryParams | None = None,
    prev_global: PoseSE3 | None = None,
) -> OdometryFrame:
    """Estimate the pose of the current scan in the previous scan's frame.

    When too few residuals survive, the frame is flagged and ``T_init`` (the
    motion prediction) is returned unchanged.
    """
    params = params or OdometryParams()
    T_init = T_init or PoseSE3.identity()
    prev_global = prev_global or PoseSE3.identity()
    target = prev if isinstance(prev, TargetIndex) else TargetIndex(prev)

    def finish(T, report, stats, flagged=False, note=""):
        return OdometryFrame(T, compose(prev_global, T), report, stats, flagged, note)

    if len(curr) == 0 or len(target.features.edge_pool) + len(target.features.planar_pool) == 0:
        return finish(T_init, None, [], True, "insufficient features")

    T = T_init
    pass_delta = (np.inf, np.inf)
    stats: list[PassStats] = []
    reports: list[SolveReport] = []
    schedule = params.schedule if (params.weighting and params.graph_filter) else None
    for n_pass in range(max(params.passes, params.max_passes)):
        if n_pass >= params.passes and reports and _settled(pass_delta, params):
            break
        T_before = T
        corrs, dropped_match = initial_correspondences(curr, target, T, params.max_match_dist)
        if params.graph_filter:
            kept, table = vote_and_filter_subgraphs(
                corrs, params.sigma, params.eta, params.x, params.subgraph_size
            )
            votes = table.votes
        else:
            kept, votes = corrs, np.zeros(len(corrs), dtype=np.int64)
        built = build_residuals(
            kept, target, T, schedule, params.channel_window, params.anchor_max_dist
        )
        stats.append(
            PassStats(len(corrs), len(kept), len(corrs) - len(kept), dropped_match,
                      built.dropped, len(built.blocks), votes)
        )
        try:
            T, report = lm_solve(built.blocks, T, params.solver)
        except (UnderConstrained, DegenerateAnchors) as exc:
            log.warning("odometry pass skipped: %s", exc)
            if not reports:
                return finish(T_init, None, stats, True, str(exc))
            break
        reports.append(report)
        pass_delta = pose_error(T_before, T)
    report = _merge_reports(reports)
    return finish(T, report, stats)


def _settled(delta: tuple[float, float], params: OdometryParams) -> bool:
    return delta[0] <= params.pass_translation_tol and delta[1] <= params.pass_rotation_tol


def _merge_reports(reports: list[SolveReport]) -> SolveReport:
    history = [c for r in reports for c in r.cost_history]
    return SolveReport(
        iterations=sum(r.iterations for r in reports),
        initial_cost=reports[0].initial_cost,
        final_cost=reports[-1].final_cost,
        reason=reports[-1].reason,
        residual_count=reports[-1].residual_count,
        cost_history=history,
        rejected_steps=sum(r.rejected_steps for r in reports),
    )


class Odometry:
    """Frame-in/frame-out odometry with a constant-velocity motion model."""

    def __init__(self, params: OdometryParams | None = None, workers: int = 1):
        self.params = params or OdometryParams()
        self.workers = workers
        self.global_pose = PoseSE3.identity()
        self.velocity = PoseSE3.identity()
        self._prev: TargetIndex | None = None

    def predict(self) -> PoseSE3:
        return self.velocity

    def process(self, features: FeatureSet) -> OdometryFrame:
        if self._prev is None:
            frame = OdometryFrame(PoseSE3.identity(), self.global_pose, None)
        else:
            frame = estimate_relative(
                features, self._prev, self.predict(), self.params, self.global_pose
            )
        self.velocity = frame.relative
        self.global_pose = frame.global_pose
        self._prev = TargetIndex(features, self.workers)
        return frame
