"""Scan-to-map refinement against voxel-downsampled feature maps.

Every feature is paired with the centroid of its five nearest map points of
the same kind. The pairs go through the same consistency vote as odometry
(with looser mapping parameters) and then into an unweighted LM refinement.
Line and plane anchors are picked from the neighborhood itself.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

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
from .matching import CorrespondenceSet, KdTree, vote_and_filter_subgraphs

log = logging.getLogger(__name__)

_KEY_BIAS = 1 << 20
_KEY_MASK = (1 << 21) - 1


def voxel_keys(points: np.ndarray, leaf: float) -> np.ndarray:
    """Pack integer voxel coordinates into one int64 per point (about +-200 km at 0.2 m)."""
    ijk = np.floor(np.asarray(points, dtype=float).reshape(-1, 3) / leaf).astype(np.int64) + _KEY_BIAS
    ijk &= _KEY_MASK
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


@dataclass(frozen=True, eq=False)
class VoxelCloud:
    """Point set with at most one point per voxel; the first point inserted wins."""

    leaf: float
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)

    def insert(self, new_points: np.ndarray) -> VoxelCloud:
        new_points = np.asarray(new_points, dtype=float).reshape(-1, 3)
        if not len(new_points):
            return self
        k = voxel_keys(new_points, self.leaf)
        _, first = np.unique(k, return_index=True)
        first.sort()
        fresh = first[~np.isin(k[first], self.keys)]
        return VoxelCloud(
            self.leaf,
            np.vstack([self.points, new_points[fresh]]),
            np.concatenate([self.keys, k[fresh]]),
        )

    def within(self, center: np.ndarray, radius: float) -> VoxelCloud:
        keep = np.linalg.norm(self.points - center, axis=1) <= radius
        if keep.all():
            return self
        return VoxelCloud(self.leaf, self.points[keep], self.keys[keep])


@dataclass(frozen=True, eq=False)
class LocalFeatureMap:
    """World-frame edge and planar maps around the latest pose."""

    edge_leaf: float = 0.2
    planar_leaf: float = 0.4
    radius: float = 100.0
    edges: VoxelCloud = None
    planars: VoxelCloud = None
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.edge_leaf <= 0 or self.planar_leaf <= 0 or self.radius <= 0:
            raise ValueError("voxel sizes and radius must be > 0")
        if self.edges is None:
            object.__setattr__(self, "edges", VoxelCloud(self.edge_leaf))
        if self.planars is None:
            object.__setattr__(self, "planars", VoxelCloud(self.planar_leaf))
        object.__setattr__(self, "_trees", {})

    def cloud(self, kind: int) -> VoxelCloud:
        return self.edges if kind == EDGE else self.planars

    def points(self, kind: int) -> np.ndarray:
        return self.cloud(kind).points

    def tree(self, kind: int) -> KdTree | None:
        if kind not in self._trees:
            pts = self.points(kind)
            self._trees[kind] = KdTree(pts) if len(pts) else None
        return self._trees[kind]

    def __len__(self) -> int:
        return len(self.edges) + len(self.planars)

    def integrate(self, features: FeatureSet, T: PoseSE3) -> LocalFeatureMap:
        """New map with the features' pools inserted at ``T``, downsampled and cropped to the radius."""
        center = np.asarray(T.translation, dtype=float)
        edges = self.edges.insert(T.apply(features.edge_pool)).within(center, self.radius)
        planars = self.planars.insert(T.apply(features.planar_pool)).within(center, self.radius)
        return LocalFeatureMap(self.edge_leaf, self.planar_leaf, self.radius, edges, planars, center)

    def export_xyz(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = directory / "map_edges.xyz", directory / "map_planars.xyz"
        for path, pts in zip(paths, (self.edges.points, self.planars.points)):
            write_xyz(path, pts)
        return paths


def integrate(features: FeatureSet, T: PoseSE3, fmap: LocalFeatureMap) -> LocalFeatureMap:
    return fmap.integrate(features, T)


def write_xyz(path: str | Path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in points:
            fh.write(f"{x:.4f} {y:.4f} {z:.4f}\n")


# ---------------------------------------------------------------------------
# correspondences


@dataclass
class MapMatches:
    corrs: CorrespondenceSet  # target = neighborhood centroid, target_index = row in ``neighbors``
    neighbors: np.ndarray  # (M, k) map indices of each neighborhood
    dropped: int


def map_correspondences(
    features: FeatureSet,
    fmap: LocalFeatureMap,
    T_guess: PoseSE3,
    k: int = 5,
    max_neighbor_dist: float = 2.0,
) -> MapMatches:
    """Pair each projected feature with the centroid of its ``k`` nearest map points.

    Features whose neighborhood has any point beyond ``max_neighbor_dist``
    (or a map with fewer than ``k`` points) are dropped and counted.
    """
    parts, hoods = [], []
    dropped = 0
    offset = 0
    for kind in (EDGE, PLANAR):
        src = features.points(kind)
        if not len(src):
            continue
        tree = fmap.tree(kind)
        if tree is None or len(tree) < k:
            dropped += len(src)
            continue
        d, idx = tree.query(T_guess.apply(src), k)
        ok = np.all(d <= max_neighbor_dist, axis=1)
        dropped += int(np.count_nonzero(~ok))
        sel = np.flatnonzero(ok)
        if not len(sel):
            continue
        centroids = fmap.points(kind)[idx[sel]].mean(axis=1)
        parts.append(
            CorrespondenceSet(
                src[sel], centroids, np.full(len(sel), kind, np.int8),
                feature_index=sel, target_index=offset + np.arange(len(sel)), distance=d[sel, 0],
            )
        )
        hoods.append(idx[sel])
        offset += len(sel)
    corrs = CorrespondenceSet.concat(parts) if parts else CorrespondenceSet.empty()
    neighbors = np.vstack(hoods) if hoods else np.zeros((0, k), dtype=np.int64)
    return MapMatches(corrs, neighbors, dropped)


def _combos(k: int, r: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(k), r)), dtype=np.int64).reshape(-1, r)


def batch_line_anchors(hoods: np.ndarray) -> np.ndarray:
    """Per neighborhood ``(M, k, 3)``, the two points farthest apart, as ``(M, 2, 3)``."""
    pairs = _combos(hoods.shape[1], 2)
    d = np.linalg.norm(hoods[:, pairs[:, 0]] - hoods[:, pairs[:, 1]], axis=2)
    pick = pairs[np.argmax(d, axis=1)]
    return np.take_along_axis(hoods, pick[:, :, None], axis=1)


def batch_plane_anchors(hoods: np.ndarray) -> np.ndarray:
    """Per neighborhood, the three points spanning the largest triangle, as ``(M, 3, 3)``."""
    tris = _combos(hoods.shape[1], 3)
    a = hoods[:, tris[:, 0]]
    area = np.linalg.norm(np.cross(hoods[:, tris[:, 1]] - a, hoods[:, tris[:, 2]] - a), axis=2)
    pick = tris[np.argmax(area, axis=1)]
    return np.take_along_axis(hoods, pick[:, :, None], axis=1)


def line_anchors(points: np.ndarray) -> np.ndarray:
    return batch_line_anchors(np.asarray(points, dtype=float)[None])[0]


def plane_anchors(points: np.ndarray) -> np.ndarray:
    return batch_plane_anchors(np.asarray(points, dtype=float)[None])[0]


def _line_fit(hoods: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Anchor separation and the largest distance of any neighbor from the anchor line."""
    u = a[:, 1] - a[:, 0]
    span = np.linalg.norm(u, axis=1)
    off = np.linalg.norm(np.cross(hoods - a[:, :1], u[:, None]), axis=2).max(axis=1)
    return span, off / np.maximum(span, 1e-300)


def _plane_fit(hoods: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.cross(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0])
    area = np.linalg.norm(n, axis=1)
    off = np.abs(np.einsum("mkj,mj->mk", hoods - a[:, :1], n)).max(axis=1)
    return area, off / np.maximum(area, 1e-300)


def map_residuals(
    kept: CorrespondenceSet,
    neighbors: np.ndarray,
    fmap: LocalFeatureMap,
    line_tolerance: float = 0.05,
    plane_tolerance: float = 0.1,
):
    """Unit-weight blocks for kept map pairs.

    A neighborhood is degenerate (block dropped and counted) when its anchors
    collapse or when any of its points sits farther than the tolerance from
    the anchor line or plane, e.g. a neighborhood that wraps around a corner.
    """
    ok = np.zeros(len(kept), dtype=bool)
    anchors: list[np.ndarray | None] = [None] * len(kept)
    for kind in (EDGE, PLANAR):
        rows = np.flatnonzero(kept.kind == kind)
        if not len(rows):
            continue
        hoods = fmap.points(kind)[neighbors[kept.target_index[rows]]]
        if kind == EDGE:
            a = batch_line_anchors(hoods)
            size, spread = _line_fit(hoods, a)
            good = (size > LINE_ANCHOR_EPS) & (spread <= line_tolerance)
        else:
            a = batch_plane_anchors(hoods)
            size, spread = _plane_fit(hoods, a)
            good = (size > PLANE_ANCHOR_EPS) & (spread <= plane_tolerance)
        ok[rows] = good
        for r, anchor in zip(rows[good], a[good]):
            anchors[r] = anchor
    blocks = [
        ResidualBlock("point_to_line" if kind == EDGE else "point_to_plane", src, anchors[i])
        for i, (src, kind) in enumerate(zip(kept.source, kept.kind))
        if ok[i]
    ]
    return blocks, int(np.count_nonzero(~ok))


# ---------------------------------------------------------------------------
# refinement


@dataclass
class MappingParams:
    edge_leaf: float = 0.2
    planar_leaf: float = 0.4
    radius: float = 100.0
    neighbors: int = 5
    max_neighbor_dist: float = 2.0
    sigma: float = 0.5
    eta: float = 0.9
    x: float = 0.10
    subgraph_size: int = 350
    line_tolerance: float = 0.05
    plane_tolerance: float = 0.1
    passes: int = 1  # passes always run
    max_passes: int = 3  # extra passes continue while the pose still moves
    pass_translation_tol: float = 1e-3
    pass_rotation_tol: float = 1e-3
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_step_norm=1.0))
    graph_filter: bool = True


@dataclass
class MapFrame:
    pose: PoseSE3
    report: SolveReport | None
    initial: int = 0
    kept: int = 0
    dropped_match: int = 0
    dropped_anchor: int = 0
    votes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    flagged: bool = False
    note: str = ""


def refine_pose(
    features: FeatureSet,
    fmap: LocalFeatureMap,
    T_odom: PoseSE3,
    params: MappingParams | None = None,
) -> MapFrame:
    """Refine the world pose of ``features`` against the map, starting from ``T_odom``.

    When too few residuals survive, ``T_odom`` comes back unchanged and the
    frame is flagged.
    """
    params = params or MappingParams()
    T = T_odom
    frame = MapFrame(T_odom, None)
    reports = []
    moved = (np.inf, np.inf)
    for n_pass in range(max(params.passes, params.max_passes)):
        if n_pass >= params.passes and (
            moved[0] <= params.pass_translation_tol and moved[1] <= params.pass_rotation_tol
        ):
            break
        T_before = T
        m = map_correspondences(features, fmap, T, params.neighbors, params.max_neighbor_dist)
        if params.graph_filter:
            kept, table = vote_and_filter_subgraphs(
                m.corrs, params.sigma, params.eta, params.x, params.subgraph_size
            )
            votes = table.votes
        else:
            kept, votes = m.corrs, np.zeros(len(m.corrs), dtype=np.int64)
        blocks, bad = map_residuals(
            kept, m.neighbors, fmap, params.line_tolerance, params.plane_tolerance
        )
        frame.initial, frame.kept, frame.dropped_match, frame.dropped_anchor = len(m.corrs), len(kept), m.dropped, bad
        frame.votes = votes
        try:
            T, report = lm_solve(blocks, T, params.solver)
        except (UnderConstrained, DegenerateAnchors) as exc:
            log.warning("mapping refinement skipped: %s", exc)
            if not reports:
                frame.flagged, frame.note = True, str(exc)
                return frame
            break
        reports.append(report)
        moved = pose_error(T_before, T)
    frame.pose = T
    frame.report = reports[-1] if len(reports) == 1 else _merge(reports)
    return frame


def _merge(reports: list[SolveReport]) -> SolveReport:
    return SolveReport(
        iterations=sum(r.iterations for r in reports),
        initial_cost=reports[0].initial_cost,
        final_cost=reports[-1].final_cost,
        reason=reports[-1].reason,
        residual_count=reports[-1].residual_count,
        cost_history=[c for r in reports for c in r.cost_history],
        rejected_steps=sum(r.rejected_steps for r in reports),
    )


class Mapper:
    """Owns the map; turns odometry poses into map-refined world poses."""

    def __init__(self, params: MappingParams | None = None):
        self.params = params or MappingParams()
        p = self.params
        self.map = LocalFeatureMap(p.edge_leaf, p.planar_leaf, p.radius)
        # maps the odometry world frame onto the map frame
        self.correction = PoseSE3.identity()

    def process(self, features: FeatureSet, T_odom: PoseSE3) -> MapFrame:
        guess = compose(self.correction, T_odom)
        if len(self.map) == 0:
            frame = MapFrame(guess, None, note="empty map")
        else:
            frame = refine_pose(features, self.map, guess, self.params)
        self.correction = compose(frame.pose, T_odom.inverse())
        self.map = self.map.integrate(features, frame.pose)
        return frame
