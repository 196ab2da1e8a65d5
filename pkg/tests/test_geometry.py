import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarodom.errors import DegenerateAnchors, UnderConstrained
from lidarodom.geometry import (
    BlockBatch,
    PoseSE3,
    ResidualBlock,
    SolverOptions,
    compose,
    inverse,
    lm_solve,
    point_to_line_residual,
    point_to_plane_residual,
    pose_error,
    residual,
    residual_jacobian,
    retract,
)

from conftest import random_pose

vec3 = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3)
seeds = st.integers(0, 2**32 - 1)


def test_compose_identity():
    I = PoseSE3.identity()
    P = compose(I, I)
    assert np.allclose(P.matrix(), np.eye(4), atol=1e-12)


@given(seeds)
@settings(max_examples=200)
def test_group_inverse(seed):
    P = random_pose(np.random.default_rng(seed))
    E = compose(P, inverse(P))
    assert E.angle() < 1e-9
    assert np.linalg.norm(E.translation) < 1e-9
    assert abs(np.linalg.norm(E.rotation) - 1.0) < 1e-9


@given(seeds)
@settings(max_examples=200)
def test_compose_matches_homogeneous_product(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)


@given(seeds)
@settings(max_examples=100)
def test_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
    t_err, r_err = pose_error(compose(compose(a, b), c), compose(a, compose(b, c)))
    assert t_err < 1e-9 and r_err < 1e-9


def test_matrix_round_trip(rng):
    for _ in range(100):
        P = random_pose(rng)
        Q = PoseSE3.from_matrix(P.matrix())
        assert np.allclose(P.matrix(), Q.matrix(), atol=1e-12)


def test_apply_matches_matrix(rng):
    P = random_pose(rng)
    pts = rng.normal(size=(20, 3))
    hom = np.hstack([pts, np.ones((20, 1))]) @ P.matrix().T
    assert np.allclose(P.apply(pts), hom[:, :3])


def test_interpolate_endpoints(rng):
    P = random_pose(rng, max_angle=3.0)
    assert PoseSE3.identity().angle() == 0.0
    t0, r0 = pose_error(P.interpolate(0.0), PoseSE3.identity())
    t1, r1 = pose_error(P.interpolate(1.0), P)
    assert max(t0, r0, t1, r1) < 1e-12
    half = P.interpolate(0.5)
    assert abs(half.angle() - P.angle() / 2) < 1e-12


# ---------------------------------------------------------------------------
# residuals


def _line_oracle(p, a, b):
    # distance to the line through a and b via projection (not the cross product)
    d = (b - a) / np.linalg.norm(b - a)
    v = p - a
    return np.linalg.norm(v - (v @ d) * d)


def _plane_oracle(p, a, b, c):
    # normal from the least-squares fit of the three anchors, sign fixed like (a-b)x(a-c)
    M = np.vstack([a, b, c])
    centered = M - M.mean(axis=0)
    n = np.linalg.svd(centered)[2][-1]
    ref = np.cross(a - b, a - c)
    n = n if n @ ref > 0 else -n
    return n @ (p - a)


def test_line_residual_examples():
    blk = ResidualBlock("point_to_line", [0.5, 0, 0], [[0, 0, 0], [1, 0, 0]])
    assert point_to_line_residual(blk, PoseSE3.identity()) == 0.0
    blk = ResidualBlock("point_to_line", [0, 0, 1], [[0, 0, 0], [1, 0, 0]])
    assert point_to_line_residual(blk, PoseSE3.identity()) == pytest.approx(1.0, abs=1e-15)


def test_plane_residual_examples():
    anchors = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    blk = ResidualBlock("point_to_plane", [0.3, 0.2, 0], anchors)
    assert point_to_plane_residual(blk, PoseSE3.identity()) == 0.0
    blk = ResidualBlock("point_to_plane", [0, 0, 1], anchors)
    assert abs(point_to_plane_residual(blk, PoseSE3.identity())) == pytest.approx(1.0, abs=1e-15)


def test_degenerate_anchors():
    blk = ResidualBlock("point_to_line", [0, 0, 1], [[1, 1, 1], [1, 1, 1]])
    with pytest.raises(DegenerateAnchors):
        point_to_line_residual(blk, PoseSE3.identity())
    blk = ResidualBlock("point_to_plane", [0, 0, 1], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(DegenerateAnchors):
        point_to_plane_residual(blk, PoseSE3.identity())
    with pytest.raises(DegenerateAnchors):
        BlockBatch([blk])


def test_block_validation():
    with pytest.raises(ValueError):
        ResidualBlock("point_to_line", [0, 0, 0], [[0, 0, 0]] * 3)
    with pytest.raises(ValueError):
        ResidualBlock("point_to_plane", [0, 0, 0], [[0, 0, 0]] * 2)
    with pytest.raises(ValueError):
        ResidualBlock("point_to_line", [0, 0, 0], [[0, 0, 0], [1, 0, 0]], weight=-1)


def test_residuals_match_independent_formulas(rng):
    for _ in range(500):
        T = random_pose(rng)
        src = rng.normal(size=3) * 5
        a, b, c = rng.normal(size=(3, 3)) * 5
        p = T.apply(src)
        line = ResidualBlock("point_to_line", src, [a, b])
        plane = ResidualBlock("point_to_plane", src, [a, b, c])
        assert point_to_line_residual(line, T) == pytest.approx(_line_oracle(p, a, b), abs=1e-9)
        assert point_to_plane_residual(plane, T) == pytest.approx(
            _plane_oracle(p, a, b, c), abs=1e-9
        )


def test_batch_matches_scalar(rng):
    blocks = []
    for _ in range(50):
        src = rng.normal(size=3)
        blocks.append(ResidualBlock("point_to_line", src, rng.normal(size=(2, 3))))
        blocks.append(ResidualBlock("point_to_plane", src, rng.normal(size=(3, 3))))
    T = random_pose(rng)
    batch = BlockBatch(blocks)
    ordered = [b for b in blocks if b.kind == "point_to_line"] + [
        b for b in blocks if b.kind == "point_to_plane"
    ]
    expected = np.array([residual(b, T) for b in ordered])
    assert np.allclose(batch.residuals(T), expected, atol=1e-12)


@given(seeds)
@settings(max_examples=200)
def test_residuals_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    T, G = random_pose(rng), random_pose(rng)
    src = rng.normal(size=3) * 3
    anchors2 = rng.normal(size=(2, 3)) * 3
    anchors3 = rng.normal(size=(3, 3)) * 3
    # moving the anchors and the transformed source by G is the same as left-composing G
    for kind, anchors in (("point_to_line", anchors2), ("point_to_plane", anchors3)):
        base = residual(ResidualBlock(kind, src, anchors), T)
        moved = residual(ResidualBlock(kind, src, G.apply(anchors)), compose(G, T))
        assert moved == pytest.approx(base, abs=1e-9)


def _fd_jacobian(block, T, h=1e-6):
    J = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        J[k] = (residual(block, retract(T, e)) - residual(block, retract(T, -e))) / (2 * h)
    return J


def test_jacobian_matches_finite_differences(rng):
    worst = 0.0
    for i in range(1000):
        T = random_pose(rng, max_translation=2.0)
        src = rng.normal(size=3) * 2
        if i % 2:
            blk = ResidualBlock("point_to_line", src, rng.normal(size=(2, 3)) * 2)
        else:
            blk = ResidualBlock("point_to_plane", src, rng.normal(size=(3, 3)) * 2)
        worst = max(worst, np.max(np.abs(residual_jacobian(blk, T) - _fd_jacobian(blk, T))))
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# solver


def _synthetic_blocks(rng, T_true, n=60):
    """Blocks whose residuals vanish exactly at ``T_true``."""
    blocks = []
    for i in range(n):
        world = rng.uniform(-10, 10, 3)
        src = T_true.inverse().apply(world)
        if i % 3 == 0:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            anchors = [world + 0.7 * d, world - 1.3 * d]
            blocks.append(ResidualBlock("point_to_line", src, anchors))
        else:
            u, v = np.linalg.qr(rng.normal(size=(3, 2)))[0].T
            anchors = [world + u, world - 0.5 * u + v, world - v]
            blocks.append(ResidualBlock("point_to_plane", src, anchors))
    return blocks


def test_lm_converged_start(rng):
    T = random_pose(rng)
    blocks = _synthetic_blocks(rng, T)
    T_out, rep = lm_solve(blocks, T)
    assert rep.iterations == 0
    assert pose_error(T_out, T) == (0.0, 0.0)


def test_lm_recovers_known_pose(rng):
    for _ in range(20):
        T_true = random_pose(rng, max_angle=0.3, max_translation=1.0)
        blocks = _synthetic_blocks(rng, T_true)
        T_out, rep = lm_solve(blocks, PoseSE3.identity(), SolverOptions(max_iterations=50))
        t_err, r_err = pose_error(T_out, T_true)
        assert t_err < 1e-6 and r_err < 1e-6, rep
        assert rep.final_cost <= rep.initial_cost


def test_lm_cost_non_increasing(rng):
    for _ in range(50):
        T_true = random_pose(rng, max_angle=0.5, max_translation=2.0)
        blocks = _synthetic_blocks(rng, T_true, n=30)
        # noisy anchors so the minimum is not zero
        noisy = [
            ResidualBlock(b.kind, b.source_point, b.anchor_points + rng.normal(0, 0.05, b.anchor_points.shape),
                          rng.uniform(0.5, 2.0))
            for b in blocks
        ]
        _, rep = lm_solve(noisy, PoseSE3.identity(), SolverOptions(max_iterations=30))
        assert all(b <= a for a, b in zip(rep.cost_history, rep.cost_history[1:]))


def test_lm_under_constrained():
    blocks = [ResidualBlock("point_to_plane", [0, 0, 1], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])] * 5
    with pytest.raises(UnderConstrained):
        lm_solve(blocks, PoseSE3.identity())
    zero_w = [ResidualBlock("point_to_plane", [0, 0, 1], [[0, 0, 0], [1, 0, 0], [0, 1, 0]], 0.0)] * 10
    with pytest.raises(UnderConstrained):
        lm_solve(zero_w, PoseSE3.identity())


def test_lm_partially_observable():
    # a single plane constrains only 3 of 6 directions; the solver must still reduce the cost
    rng = np.random.default_rng(3)
    blocks = [
        ResidualBlock("point_to_plane", [x, y, 1.0], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        for x, y in rng.uniform(-5, 5, (20, 2))
    ]
    T, rep = lm_solve(blocks, PoseSE3.identity(), SolverOptions(max_iterations=20))
    assert rep.final_cost < 1e-12
