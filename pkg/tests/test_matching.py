import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarodom.errors import EmptyTree
from lidarodom.features import EDGE, PLANAR, FeatureSet
from lidarodom.geometry import PoseSE3
from lidarodom.matching import (
    Correspondence,
    CorrespondenceSet,
    KdTree,
    TargetIndex,
    affinity_matrix,
    consistency_score,
    count_votes,
    initial_correspondences,
    kdtree_build,
    kdtree_knn,
    partition_sectors,
    vote_and_filter,
    vote_and_filter_subgraphs,
    vote_histogram,
)

from conftest import random_pose


def brute_knn(points, q, k):
    d = [math.dist(p, q) for p in points]
    order = sorted(range(len(points)), key=lambda i: (d[i], i))[:k]
    return [d[i] for i in order], order


def brute_votes(src, tgt, sigma, eta):
    n = len(src)
    votes = [0] * n
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = math.dist(tgt[i], tgt[j]) - math.dist(src[i], src[j])
            if math.exp(-d * d / (sigma * sigma)) >= eta:
                votes[i] += 1
    return votes


def brute_filter(src, tgt, sigma, eta, x):
    votes = brute_votes(src, tgt, sigma, eta)
    kept = [i for i in range(len(votes)) if votes[i] > x * len(votes)]
    kept.sort(key=lambda i: (-votes[i], i))
    return votes, kept


def inlier_outlier_set(rng, n_in=150, n_out=50, cube=20.0):
    T = random_pose(rng, max_translation=5.0)
    src_in = rng.uniform(-cube / 2, cube / 2, (n_in, 3))
    tgt_in = T.apply(src_in)
    src_out = rng.uniform(-cube / 2, cube / 2, (n_out, 3))
    tgt_out = rng.uniform(-cube / 2, cube / 2, (n_out, 3))
    src = np.vstack([src_in, src_out])
    tgt = np.vstack([tgt_in, tgt_out])
    perm = rng.permutation(len(src))
    is_out = np.r_[np.zeros(n_in, bool), np.ones(n_out, bool)][perm]
    return CorrespondenceSet(src[perm], tgt[perm]), is_out


# ---------------------------------------------------------------------------
# KD-tree


def test_kdtree_exact_point(rng):
    pts = rng.normal(size=(50, 3))
    tree = kdtree_build(pts)
    p, d, i = kdtree_knn(tree, pts[17], 1)
    assert i[0] == 17 and d[0] == 0.0 and np.array_equal(p[0], pts[17])


def test_kdtree_matches_brute_force(rng):
    for _ in range(50):
        pts = rng.uniform(-10, 10, (100, 3))
        tree = KdTree(pts)
        q = rng.uniform(-12, 12, 3)
        d, i = tree.knn(q, 5)
        bd, bi = brute_knn(pts, q, 5)
        assert i.tolist() == bi
        assert np.allclose(d, bd, atol=1e-12)


def test_kdtree_saturation(rng):
    pts = rng.normal(size=(7, 3))
    d, i = KdTree(pts).knn([0, 0, 0], 20)
    assert len(i) == 7
    assert np.all(np.diff(d) >= 0)
    assert sorted(i.tolist()) == list(range(7))


def test_kdtree_ties_by_insertion_index():
    # a lattice gives many equal distances
    g = np.array([[x, y, z] for x in range(4) for y in range(4) for z in range(4)], dtype=float)
    perm = np.random.default_rng(5).permutation(len(g))
    pts = g[perm]
    tree = KdTree(pts)
    for q in ([1.5, 1.5, 1.5], [1, 1, 1], [0.5, 0, 0], [2, 2, 1.5]):
        for k in (1, 3, 6, 9):
            d, i = tree.knn(q, k)
            bd, bi = brute_knn(pts, q, k)
            assert i.tolist() == bi


def test_kdtree_batch_query_matches_single(rng):
    pts = rng.normal(size=(200, 3))
    tree = KdTree(pts)
    qs = rng.normal(size=(30, 3))
    D, I = tree.query(qs, 4)
    for q, d, i in zip(qs, D, I):
        d1, i1 = tree.knn(q, 4)
        assert np.array_equal(i, i1)


def test_kdtree_empty():
    with pytest.raises(EmptyTree):
        KdTree(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# stage one


def _features(rng, n_edges=20, n_planar=60):
    return FeatureSet(
        rng.uniform(-10, 10, (n_edges, 3)), rng.uniform(-10, 10, (n_planar, 3)),
        rng.integers(0, 8, n_edges), rng.integers(0, 8, n_planar),
    )


def test_self_match(rng):
    fs = _features(rng)
    corrs, dropped = initial_correspondences(fs, TargetIndex(fs))
    assert dropped == 0 and len(corrs) == len(fs)
    assert np.all(corrs.distance == 0)
    assert np.array_equal(corrs.source, corrs.target)


def test_multi_to_one_permitted():
    target = FeatureSet(np.zeros((0, 3)), [[0, 0, 0], [10, 0, 0]], [], [0, 0])
    current = FeatureSet(np.zeros((0, 3)), [[0.1, 0, 0], [-0.1, 0, 0], [9, 0, 0]], [], [0, 0, 0])
    corrs, dropped = initial_correspondences(current, TargetIndex(target))
    assert len(corrs) == 3 and dropped == 0
    assert corrs.target_index.tolist() == [0, 0, 1]


def test_max_match_distance_drops():
    target = FeatureSet(np.zeros((0, 3)), [[0, 0, 0]], [], [0])
    current = FeatureSet([[1, 1, 1]], [[0, 0, 4.0], [0, 0, 6.0]], [0], [0, 0])
    corrs, dropped = initial_correspondences(current, TargetIndex(target), max_match_dist=5.0)
    assert len(corrs) == 1 and dropped == 2  # no edge pool, one planar too far


def test_known_transform_pairs(rng):
    prev = _features(rng, 30, 100)
    T = random_pose(rng, max_angle=0.1, max_translation=0.5)
    curr = prev.transformed(T.inverse())
    corrs, _ = initial_correspondences(curr, TargetIndex(prev), pose=T)
    # with the true pose every feature lands on its own origin point
    for kind in (EDGE, PLANAR):
        sel = corrs.kind == kind
        assert np.array_equal(corrs.feature_index[sel], corrs.target_index[sel])


# ---------------------------------------------------------------------------
# consistency and votes


def test_score_rigid_pair_is_one(rng):
    T = random_pose(rng)
    p, q = rng.normal(size=(2, 3))
    a = Correspondence(p, T.apply(p), PLANAR)
    b = Correspondence(q, T.apply(q), PLANAR)
    assert consistency_score(a, b, 0.2) == pytest.approx(1.0, abs=1e-12)


def test_score_at_sigma():
    sigma = 0.3
    a = Correspondence(np.zeros(3), np.zeros(3), PLANAR)
    b = Correspondence(np.array([1.0, 0, 0]), np.array([1.0 + sigma, 0, 0]), PLANAR)
    assert consistency_score(a, b, sigma) == pytest.approx(math.exp(-1), abs=1e-12)
    assert math.exp(-1) == pytest.approx(0.367879, abs=1e-6)


def test_score_matches_formula(rng):
    for _ in range(200):
        s = rng.normal(size=(2, 3)) * 5
        t = rng.normal(size=(2, 3)) * 5
        sigma = rng.uniform(0.05, 2)
        d = math.dist(t[0], t[1]) - math.dist(s[0], s[1])
        expected = math.exp(-d * d / sigma**2)
        got = consistency_score(Correspondence(s[0], t[0], 0), Correspondence(s[1], t[1], 0), sigma)
        assert got == pytest.approx(expected, abs=1e-12)


def test_affinity_symmetric_unit_diagonal(rng):
    corrs, _ = inlier_outlier_set(rng, 40, 20)
    M = affinity_matrix(corrs.source, corrs.target, 0.2)
    assert np.allclose(M, M.T) and np.all(np.diag(M) == 1.0)
    assert np.all((M >= 0) & (M <= 1))


def test_figure_three_scenario():
    T = PoseSE3.from_rotvec([0, 0, 0.3], [1.0, -2.0, 0.5])
    src = np.array([[0.0, 0, 0], [4, 0, 0], [0, 3, 0], [2, 2, 2]])
    tgt = T.apply(src)
    tgt[3] += [3.0, -1.0, 2.5]  # v4 corrupted
    corrs = CorrespondenceSet(src, tgt)
    kept, table = vote_and_filter(corrs, sigma=0.2, eta=0.9, x=0.25)
    assert table.votes.tolist() == [2, 2, 2, 0]
    assert len(kept) == 3
    assert sorted(kept.source.tolist()) == sorted(src[:3].tolist())


def test_perfect_consistency_keeps_everything(rng):
    T = random_pose(rng)
    src = rng.uniform(-10, 10, (60, 3))
    kept, table = vote_and_filter(CorrespondenceSet(src, T.apply(src)))
    assert np.all(table.votes == 59) and len(kept) == 60


def test_small_inputs_pass_through():
    one = CorrespondenceSet([[0, 0, 0]], [[5, 5, 5]])
    kept, table = vote_and_filter(one)
    assert len(kept) == 1 and table.votes.tolist() == [0]
    kept, _ = vote_and_filter(CorrespondenceSet.empty())
    assert len(kept) == 0


def test_votes_match_brute_force_and_reject_outliers(rng):
    removed = []
    for _ in range(5):
        corrs, is_out = inlier_outlier_set(rng)
        kept, table = vote_and_filter(corrs, 0.2, 0.9, 0.10)
        votes, kept_ref = brute_filter(corrs.source.tolist(), corrs.target.tolist(), 0.2, 0.9, 0.10)
        assert table.votes.tolist() == votes
        assert np.array_equal(kept.source, corrs.source[kept_ref])
        removed.append(np.mean(~table.kept[is_out]))
    assert np.mean(removed) >= 0.95


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_vote_properties(seed):
    rng = np.random.default_rng(seed)
    corrs, _ = inlier_outlier_set(rng, 30, 20)
    votes = count_votes(corrs.source, corrs.target, 0.2, 0.9)
    assert np.all((votes >= 0) & (votes <= len(corrs) - 1))
    # removing one correspondence never raises another's votes
    drop = int(rng.integers(len(corrs)))
    rest = np.delete(np.arange(len(corrs)), drop)
    fewer = count_votes(corrs.source[rest], corrs.target[rest], 0.2, 0.9)
    assert np.all(fewer <= votes[rest])
    # independent rigid motions of both clouds leave votes unchanged
    A, B = random_pose(rng), random_pose(rng)
    moved = count_votes(A.apply(corrs.source), B.apply(corrs.target), 0.2, 0.9)
    assert np.array_equal(moved, votes)


def test_partition_equal_counts(rng):
    corrs, _ = inlier_outlier_set(rng, 900, 300)
    sub = partition_sectors(corrs, 200)
    counts = np.bincount(sub)
    assert len(counts) == 6 and counts.max() - counts.min() <= 1
    az = np.arctan2(corrs.source[:, 1], corrs.source[:, 0])
    for s in range(5):
        assert az[sub == s].max() <= az[sub == s + 1].min()


def test_subgraph_voting_is_local(rng):
    corrs, _ = inlier_outlier_set(rng, 300, 100)
    kept, table = vote_and_filter_subgraphs(corrs, subgraph_size=200)
    sub = partition_sectors(corrs, 200)
    for s in np.unique(sub):
        members = np.flatnonzero(sub == s)
        _, local = vote_and_filter(corrs.subset(members))
        assert np.array_equal(table.votes[members], local.votes)
    assert np.all(np.diff(kept.votes) <= 0)
    assert len(kept) == table.n_kept


def test_vote_histogram():
    h = vote_histogram(np.array([0, 0, 1, 5, 9]), bins=5)
    assert sum(c for _, _, c in h) == 5
    assert h[0][0] == 0 and h[-1][1] == 9
