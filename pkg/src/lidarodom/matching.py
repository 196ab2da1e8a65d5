"""Two-stage correspondence selection.

Stage one pairs every feature with its nearest neighbor in the target cloud.
Stage two builds a compatibility graph over those pairs: two pairs agree when
the distance between their sources matches the distance between their
targets, scored ``exp(-d**2 / sigma**2)``. Each pair collects one vote per
partner scoring at least ``eta``; pairs with too few votes are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyTree
from .features import EDGE, PLANAR, FeatureSet
from .geometry import PoseSE3

KIND_NAMES = {EDGE: "edge", PLANAR: "planar"}


class KdTree:
    """Nearest-neighbor index with brute-force-identical results.

    Candidates come from a scipy ``cKDTree``; distances are recomputed exactly
    and ties are broken by insertion index.
    """

    def __init__(self, points: np.ndarray, workers: int = 1):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise EmptyTree("cannot build a KD-tree over zero points")
        self.points = points
        self.workers = workers
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the ``k`` nearest points, shape ``(M, k)``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        n = len(self.points)
        k_eff = min(k, n)
        if len(queries) == 0:
            return np.zeros((0, k_eff)), np.zeros((0, k_eff), dtype=np.int64)
        k_probe = min(k_eff + 1, n)
        _, idx = self._tree.query(queries, k=k_probe, workers=self.workers)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), k_probe)
        d = np.sqrt(((self.points[idx] - queries[:, None, :]) ** 2).sum(axis=2))
        order = np.lexsort((idx, d), axis=1)
        rows = np.arange(len(queries))[:, None]
        d, idx = d[rows, order], idx[rows, order]
        if k_probe > k_eff:
            # a tie straddling the k-th slot may hide a lower-index point outside the probe
            tied = d[:, k_eff] <= d[:, k_eff - 1]
            for i in np.flatnonzero(tied):
                d[i, :k_eff], idx[i, :k_eff] = self._exact_row(queries[i], k_eff, d[i, k_eff - 1])
        return d[:, :k_eff], idx[:, :k_eff]

    def _exact_row(self, q: np.ndarray, k: int, radius: float):
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
        dist = np.sqrt(((self.points[cand] - q) ** 2).sum(axis=1))
        o = np.lexsort((cand, dist))[:k]
        return dist[o], cand[o]

    def knn(self, query: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        d, i = self.query(np.asarray(query, dtype=float).reshape(1, 3), k)
        return d[0], i[0]


def kdtree_build(points: np.ndarray, workers: int = 1) -> KdTree:
    return KdTree(points, workers)


def kdtree_knn(tree: KdTree, query: np.ndarray, k: int = 1):
    """The ``k`` nearest stored points to ``query``: ``(points, distances, indices)``."""
    d, i = tree.knn(query, k)
    return tree.points[i], d, i


# ---------------------------------------------------------------------------
# correspondences


@dataclass(frozen=True)
class Correspondence:
    source: np.ndarray
    target: np.ndarray
    kind: int
    subregion_id: int = 0
    votes: int = 0


def _col(v, n, dtype, fill=0):
    if v is None:
        return np.full(n, fill, dtype=dtype)
    return np.asarray(v, dtype=dtype).reshape(-1)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Column-oriented list of (source, target) pairs.

    ``source`` is in the current scan's own frame; ``target`` is in the
    target cloud's frame. ``feature_index`` points into the current features
    of the given kind, ``target_index`` into the target cloud (or into a
    neighborhood table for map centroids).
    """

    source: np.ndarray
    target: np.ndarray
    kind: np.ndarray = None
    feature_index: np.ndarray = None
    target_index: np.ndarray = None
    subregion: np.ndarray = None
    votes: np.ndarray = None
    distance: np.ndarray = None

    def __post_init__(self):
        src = np.asarray(self.source, dtype=float).reshape(-1, 3)
        tgt = np.asarray(self.target, dtype=float).reshape(-1, 3)
        if len(src) != len(tgt):
            raise ValueError("source and target counts differ")
        n = len(src)
        s = lambda name, v: object.__setattr__(self, name, v)
        s("source", src)
        s("target", tgt)
        s("kind", _col(self.kind, n, np.int8, PLANAR))
        s("feature_index", _col(self.feature_index, n, np.int64, -1))
        s("target_index", _col(self.target_index, n, np.int64, -1))
        s("subregion", _col(self.subregion, n, np.int64, 0))
        s("votes", _col(self.votes, n, np.int64, 0))
        s("distance", _col(self.distance, n, float, np.nan))

    @classmethod
    def empty(cls) -> CorrespondenceSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, items: list[Correspondence]) -> CorrespondenceSet:
        if not items:
            return cls.empty()
        return cls(
            np.array([c.source for c in items]),
            np.array([c.target for c in items]),
            [c.kind for c in items],
            np.arange(len(items)),
            subregion=[c.subregion_id for c in items],
            votes=[c.votes for c in items],
        )

    @classmethod
    def concat(cls, parts: list[CorrespondenceSet]) -> CorrespondenceSet:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(
            cat("source"), cat("target"), cat("kind"), cat("feature_index"),
            cat("target_index"), cat("subregion"), cat("votes"), cat("distance"),
        )

    def __len__(self) -> int:
        return len(self.source)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(
            self.source[i].copy(), self.target[i].copy(), int(self.kind[i]),
            int(self.subregion[i]), int(self.votes[i]),
        )

    def subset(self, idx) -> CorrespondenceSet:
        idx = np.asarray(idx)
        return CorrespondenceSet(
            self.source[idx], self.target[idx], self.kind[idx], self.feature_index[idx],
            self.target_index[idx], self.subregion[idx], self.votes[idx], self.distance[idx],
        )

    def with_votes(self, votes: np.ndarray) -> CorrespondenceSet:
        out = self.subset(np.arange(len(self)))
        object.__setattr__(out, "votes", np.asarray(votes, dtype=np.int64).reshape(-1))
        return out

    def with_subregions(self, sub: np.ndarray) -> CorrespondenceSet:
        out = self.subset(np.arange(len(self)))
        object.__setattr__(out, "subregion", np.asarray(sub, dtype=np.int64).reshape(-1))
        return out


class TargetIndex:
    """KD-trees over a target cloud's edge and planar pools, whole and per channel."""

    def __init__(self, features: FeatureSet, workers: int = 1):
        self.features = features
        self.workers = workers
        self.trees: dict[int, KdTree | None] = {}
        self.channel_trees: dict[int, dict[int, tuple[KdTree, np.ndarray]]] = {}
        for kind in (EDGE, PLANAR):
            pool = features.pool(kind)
            self.trees[kind] = KdTree(pool, workers) if len(pool) else None
            per = {}
            chans = features.pool_channels(kind)
            for c in np.unique(chans):
                members = np.flatnonzero(chans == c)
                per[int(c)] = (KdTree(pool[members], workers), members)
            self.channel_trees[kind] = per

    def pool(self, kind: int) -> np.ndarray:
        return self.features.pool(kind)

    def pool_channels(self, kind: int) -> np.ndarray:
        return self.features.pool_channels(kind)


def initial_correspondences(
    features: FeatureSet,
    target: TargetIndex,
    pose: PoseSE3 | None = None,
    max_match_dist: float = 5.0,
) -> tuple[CorrespondenceSet, int]:
    """Nearest-neighbor pairing of every feature with the target pool of its kind.

    Features are projected into the target frame by ``pose`` before the
    search. Several features may share a target at this stage. Returns the
    correspondences and the number of features dropped for lack of a
    neighbor within ``max_match_dist``.
    """
    pose = pose or PoseSE3.identity()
    parts = []
    dropped = 0
    for kind in (EDGE, PLANAR):
        pts = features.points(kind)
        if not len(pts):
            continue
        tree = target.trees[kind]
        if tree is None:
            dropped += len(pts)
            continue
        d, i = tree.query(pose.apply(pts), 1)
        d, i = d[:, 0], i[:, 0]
        ok = d <= max_match_dist
        dropped += int(np.count_nonzero(~ok))
        sel = np.flatnonzero(ok)
        parts.append(
            CorrespondenceSet(
                pts[sel], tree.points[i[sel]], np.full(len(sel), kind), sel, i[sel],
                distance=d[sel],
            )
        )
    return CorrespondenceSet.concat(parts), dropped


# ---------------------------------------------------------------------------
# compatibility graph


def consistency_score(a: Correspondence, b: Correspondence, sigma: float) -> float:
    d = np.linalg.norm(a.target - b.target) - np.linalg.norm(a.source - b.source)
    return float(np.exp(-(d * d) / (sigma * sigma)))


def affinity_matrix(source: np.ndarray, target: np.ndarray, sigma: float) -> np.ndarray:
    """Pairwise consistency scores; symmetric with a unit diagonal."""
    ds = np.sqrt(((source[:, None, :] - source[None, :, :]) ** 2).sum(axis=2))
    dt = np.sqrt(((target[:, None, :] - target[None, :, :]) ** 2).sum(axis=2))
    d = dt - ds
    return np.exp(-(d * d) / (sigma * sigma))


def count_votes(source: np.ndarray, target: np.ndarray, sigma: float, eta: float) -> np.ndarray:
    """Votes per correspondence: partners whose consistency score is at least ``eta``."""
    if len(source) < 2:
        return np.zeros(len(source), dtype=np.int64)
    M = affinity_matrix(source, target, sigma)
    # the unit diagonal always passes; remove the self vote
    return np.count_nonzero(M >= eta, axis=1).astype(np.int64) - 1


@dataclass
class VoteTable:
    """Votes for every input correspondence of one (sub)graph or merged set."""

    votes: np.ndarray
    order: np.ndarray  # indices by descending votes, ties by position
    kept: np.ndarray  # boolean mask over the input
    threshold: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_candidates(self) -> int:
        return len(self.votes)

    @property
    def n_kept(self) -> int:
        return int(np.count_nonzero(self.kept))


def descending_order(votes: np.ndarray) -> np.ndarray:
    votes = np.asarray(votes)
    return np.lexsort((np.arange(len(votes)), -votes))


def vote_and_filter(
    corrs: CorrespondenceSet, sigma: float = 0.2, eta: float = 0.9, x: float = 0.10
) -> tuple[CorrespondenceSet, VoteTable]:
    """Vote within ``corrs`` (one subgraph) and keep pairs with ``votes > x * len(corrs)``.

    The kept set is returned ordered by descending votes and carries its
    votes. Fewer than two correspondences pass through with zero votes.
    """
    if not 0 < eta <= 1:
        raise ValueError("eta must be in (0, 1]")
    if not 0 <= x < 1:
        raise ValueError("x must be in [0, 1)")
    n = len(corrs)
    if n < 2:
        votes = np.zeros(n, dtype=np.int64)
        table = VoteTable(votes, np.arange(n), np.ones(n, dtype=bool), np.zeros(n))
        return corrs.with_votes(votes), table
    votes = count_votes(corrs.source, corrs.target, sigma, eta)
    order = descending_order(votes)
    limit = x * n
    kept_mask = votes > limit
    kept_idx = order[kept_mask[order]]
    table = VoteTable(votes, order, kept_mask, np.full(n, limit))
    return corrs.with_votes(votes).subset(kept_idx), table


def partition_sectors(corrs: CorrespondenceSet, target_size: int) -> np.ndarray:
    """Equal-count azimuth sectors of about ``target_size`` correspondences each."""
    n = len(corrs)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    sectors = max(1, int(round(n / max(target_size, 1))))
    az = np.arctan2(corrs.source[:, 1], corrs.source[:, 0])
    order = np.lexsort((np.arange(n), az))
    sub = np.empty(n, dtype=np.int64)
    sub[order] = (np.arange(n) * sectors) // n
    return sub


def vote_and_filter_subgraphs(
    corrs: CorrespondenceSet,
    sigma: float = 0.2,
    eta: float = 0.9,
    x: float = 0.10,
    subgraph_size: int = 200,
) -> tuple[CorrespondenceSet, VoteTable]:
    """Split into azimuth sectors, vote inside each, and merge the survivors.

    The merged kept set is ordered by descending votes (ties by sector, then
    by position in the sector).
    """
    sub = partition_sectors(corrs, subgraph_size)
    corrs = corrs.with_subregions(sub)
    n = len(corrs)
    votes = np.zeros(n, dtype=np.int64)
    kept = np.zeros(n, dtype=bool)
    limit = np.zeros(n)
    for s in np.unique(sub):
        members = np.flatnonzero(sub == s)
        _, table = vote_and_filter(corrs.subset(members), sigma, eta, x)
        votes[members] = table.votes
        kept[members] = table.kept
        limit[members] = table.threshold
    order = descending_order(votes)
    kept_idx = order[kept[order]]
    return corrs.with_votes(votes).subset(kept_idx), VoteTable(votes, order, kept, limit)


def vote_histogram(votes: np.ndarray, bins: int = 10) -> list[tuple[int, int, int]]:
    """``(low, high, count)`` buckets over the vote range, for diagnostics."""
    votes = np.asarray(votes)
    if not len(votes):
        return []
    top = int(votes.max())
    edges = np.linspace(0, top + 1, min(bins, top + 1) + 1).astype(int)
    edges = np.unique(edges)
    counts, _ = np.histogram(votes, bins=edges)
    return [(int(a), int(b) - 1, int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]
