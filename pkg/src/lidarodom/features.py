"""Per-channel smoothness and non-conspicuous edge/planar selection.

Each beam channel is split into equal-count subregions. Inside a subregion the
eligible points are ranked by descending smoothness; edges are taken just
after the ``k`` sharpest points and planars just before the ``l`` flattest,
so the most extreme (and most often spurious) returns are never used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InsufficientNeighbors
from .geometry import PoseSE3
from .ingest import Scan

EDGE = 0
PLANAR = 1


@dataclass(frozen=True)
class SelectionParams:
    m: int = 2  # edges per subregion
    n: int = 4  # planars per subregion
    k: int = 1  # sharpest points skipped
    l: int = 2  # flattest points skipped
    subregions: int = 6
    r_t: float = 0.1
    half_window: int = 5
    sigma_disjoint: float = 0.3

    def __post_init__(self):
        for name in ("m", "n", "k", "l"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.subregions < 1 or self.half_window < 1:
            raise ValueError("subregions and half_window must be >= 1")
        if self.r_t < 0 or self.sigma_disjoint <= 0:
            raise ValueError("r_t must be >= 0 and sigma_disjoint > 0")

    def conspicuous(self) -> SelectionParams:
        """Classic LOAM selection: sharpest and flattest points, nothing skipped."""
        return replace(self, k=0, l=0)


def mark_disjoint(points: np.ndarray, sigma_disjoint: float) -> np.ndarray:
    """Mask of interior points whose neighbor distances differ by more than ``sigma_disjoint``.

    The first and last points have only one neighbor and are never marked.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    mask = np.zeros(len(points), dtype=bool)
    if len(points) < 3:
        return mask
    gaps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    mask[1:-1] = np.abs(gaps[1:] - gaps[:-1]) > sigma_disjoint
    return mask


def smoothness(points: np.ndarray, i: int, half_window: int = 5) -> float:
    """Smoothness of point ``i`` from ``half_window`` neighbors on each side.

    The set size counts the candidate itself, so the divisor is
    ``(2 * half_window + 1) * |p_i|``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if i - half_window < 0 or i + half_window >= len(points):
        raise InsufficientNeighbors(f"point {i} lacks {half_window} neighbors on both sides")
    p = points[i]
    window = points[i - half_window : i + half_window + 1]
    diff = (p - window).sum(axis=0)
    return float(np.linalg.norm(diff) / ((2 * half_window + 1) * np.linalg.norm(p)))


def smoothness_profile(points: np.ndarray, half_window: int = 5) -> np.ndarray:
    """Vectorized smoothness for a whole channel; NaN where the window is incomplete."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    r = np.full(n, np.nan)
    w = half_window
    if n < 2 * w + 1:
        return r
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(points, axis=0)])
    centers = np.arange(w, n - w)
    window_sum = csum[centers + w + 1] - csum[centers - w]
    diff = (2 * w + 1) * points[centers] - window_sum
    norms = np.linalg.norm(points[centers], axis=1)
    r[centers] = np.linalg.norm(diff, axis=1) / ((2 * w + 1) * norms)
    return r


def rank_subregion(r: np.ndarray) -> np.ndarray:
    """Positions sorted by descending smoothness; ties keep sweep order."""
    return np.lexsort((np.arange(len(r)), -np.asarray(r)))


def select_in_subregion(r: np.ndarray, params: SelectionParams) -> tuple[np.ndarray, np.ndarray]:
    """Indices (into ``r``) of the edges and planars selected from one subregion.

    Edges occupy ranks ``k+1 .. k+m`` and must exceed ``r_t``; planars occupy
    ranks ``len-l-n+1 .. len-l`` and must be below ``r_t``. Both windows are
    clipped so the ``k`` sharpest and ``l`` flattest points stay unused.
    """
    r = np.asarray(r, dtype=float)
    order = rank_subregion(r)
    size = len(order)
    e_stop = min(params.k + params.m, size - params.l)
    edges = order[params.k : max(e_stop, params.k)]
    edges = edges[r[edges] > params.r_t]
    p_start = max(size - params.l - params.n, params.k)
    planars = order[p_start : max(size - params.l, p_start)]
    planars = planars[r[planars] < params.r_t]
    return edges, planars


def subregion_bounds(n_points: int, half_window: int, subregions: int) -> list[tuple[int, int]]:
    """Equal-count split of the candidate range ``[half_window, n - half_window)``."""
    start, stop = half_window, n_points - half_window
    if stop <= start:
        return []
    cuts = start + ((stop - start) * np.arange(subregions + 1)) // subregions
    return [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:])]


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Selected features plus the candidate pools used as registration targets.

    ``edge_pool``/``planar_pool`` hold every eligible point classified by the
    threshold alone (the selected features are a subset). When a FeatureSet
    becomes the previous scan, correspondences search these denser pools.
    """

    edges: np.ndarray
    planars: np.ndarray
    edge_channel: np.ndarray
    planar_channel: np.ndarray
    edge_subregion: np.ndarray = None
    planar_subregion: np.ndarray = None
    edge_pool: np.ndarray = None
    planar_pool: np.ndarray = None
    edge_pool_channel: np.ndarray = None
    planar_pool_channel: np.ndarray = None
    edge_smoothness: np.ndarray = None
    planar_smoothness: np.ndarray = None
    n_channels: int = 0

    def __post_init__(self):
        def arr(v, shape, dtype):
            a = np.zeros(shape, dtype=dtype) if v is None else np.asarray(v, dtype=dtype)
            a = a.reshape((-1,) + shape[1:]) if a.ndim else a
            return a

        edges = arr(self.edges, (0, 3), float)
        planars = arr(self.planars, (0, 3), float)
        set_ = lambda name, v: object.__setattr__(self, name, v)
        set_("edges", edges)
        set_("planars", planars)
        set_("edge_channel", arr(self.edge_channel, (0,), np.int64))
        set_("planar_channel", arr(self.planar_channel, (0,), np.int64))
        for kind, pts in (("edge", edges), ("planar", planars)):
            if getattr(self, f"{kind}_subregion") is None:
                set_(f"{kind}_subregion", np.zeros(len(pts), dtype=np.int64))
            if getattr(self, f"{kind}_smoothness") is None:
                set_(f"{kind}_smoothness", np.full(len(pts), np.nan))
            if getattr(self, f"{kind}_pool") is None:
                set_(f"{kind}_pool", pts)
                set_(f"{kind}_pool_channel", getattr(self, f"{kind}_channel"))
            else:
                set_(f"{kind}_pool", arr(getattr(self, f"{kind}_pool"), (0, 3), float))
                set_(f"{kind}_pool_channel", arr(getattr(self, f"{kind}_pool_channel"), (0,), np.int64))
        if len(self.edge_channel) != len(edges) or len(self.planar_channel) != len(planars):
            raise ValueError("channel arrays must match feature counts")
        if self.n_channels == 0:
            chans = [self.edge_channel, self.planar_channel, self.edge_pool_channel, self.planar_pool_channel]
            top = max((int(c.max()) for c in chans if len(c)), default=-1)
            set_("n_channels", top + 1)

    def points(self, kind: int) -> np.ndarray:
        return self.edges if kind == EDGE else self.planars

    def channels(self, kind: int) -> np.ndarray:
        return self.edge_channel if kind == EDGE else self.planar_channel

    def pool(self, kind: int) -> np.ndarray:
        return self.edge_pool if kind == EDGE else self.planar_pool

    def pool_channels(self, kind: int) -> np.ndarray:
        return self.edge_pool_channel if kind == EDGE else self.planar_pool_channel

    def transformed(self, T: PoseSE3) -> FeatureSet:
        return replace(
            self,
            edges=T.apply(self.edges),
            planars=T.apply(self.planars),
            edge_pool=T.apply(self.edge_pool),
            planar_pool=T.apply(self.planar_pool),
        )

    def __len__(self) -> int:
        return len(self.edges) + len(self.planars)


def select_features(scan: Scan, params: SelectionParams | None = None) -> FeatureSet:
    params = params or SelectionParams()
    edges, planars, e_pool, p_pool = [], [], [], []
    for c in range(scan.n_channels):
        sl = scan.channel_slice(c)
        pts = scan.points[sl]
        if len(pts) < 2 * params.half_window + 1:
            continue
        r = smoothness_profile(pts, params.half_window)
        eligible = ~np.isnan(r) & ~mark_disjoint(pts, params.sigma_disjoint)
        for s, (a, b) in enumerate(subregion_bounds(len(pts), params.half_window, params.subregions)):
            idx = np.arange(a, b)[eligible[a:b]]
            if not len(idx):
                continue
            e_sel, p_sel = select_in_subregion(r[idx], params)
            for sel, out in ((e_sel, edges), (p_sel, planars)):
                if len(sel):
                    # keep sweep order inside the subregion for deterministic output
                    chosen = np.sort(idx[sel])
                    out.append((pts[chosen], c, s, r[chosen]))
        e_mask = eligible & (r > params.r_t)
        p_mask = eligible & (r < params.r_t)
        e_pool.append((pts[e_mask], c))
        p_pool.append((pts[p_mask], c))

    def gather(items):
        if not items:
            return np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        pts = np.vstack([it[0] for it in items])
        ch = np.concatenate([np.full(len(it[0]), it[1]) for it in items])
        sub = np.concatenate([np.full(len(it[0]), it[2]) for it in items])
        r = np.concatenate([it[3] for it in items])
        return pts, ch, sub, r

    def gather_pool(items):
        if not items:
            return np.zeros((0, 3)), np.zeros(0, np.int64)
        return np.vstack([it[0] for it in items]), np.concatenate([np.full(len(it[0]), it[1]) for it in items])

    ep, ec, es, er = gather(edges)
    pp, pc, ps, pr = gather(planars)
    epool, epc = gather_pool(e_pool)
    ppool, ppc = gather_pool(p_pool)
    return FeatureSet(
        ep, pp, ec, pc, es, ps, epool, ppool, epc, ppc, er, pr, n_channels=scan.n_channels
    )
