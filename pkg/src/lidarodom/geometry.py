"""Rigid-body math, LOAM residuals and a small Levenberg-Marquardt solver.

Poses store a unit quaternion ``(w, x, y, z)`` and a translation. A pose
``T`` maps a point ``p`` to ``R @ p + t``; ``compose(a, b)`` applies ``b``
first, then ``a``.

The solver parameterizes a step as ``(omega, v)``: the rotation is updated as
``exp(omega) * R`` and the translation as ``t + v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import DegenerateAnchors, SingularNormalEquations, UnderConstrained

LINE_ANCHOR_EPS = 1e-6
PLANE_ANCHOR_EPS = 1e-9


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the quaternion with non-negative w."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotvec_to_quat(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    theta = float(np.linalg.norm(rv))
    half = 0.5 * theta
    if theta < 1e-8:
        # second-order series keeps the result accurate for tiny LM steps
        return np.array([1.0 - theta * theta / 8.0, *(0.5 - theta * theta / 48.0) * rv])
    return np.array([np.cos(half), *(np.sin(half) / theta) * rv])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v
    return (2.0 * np.arctan2(s, q[0]) / s) * v


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# poses


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0 or not np.all(np.isfinite(t)):
            raise ValueError("pose must have a finite, non-zero quaternion and finite translation")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "_R", _frozen(quat_to_matrix(q)))

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> PoseSE3:
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> PoseSE3:
        return cls(rotvec_to_quat(np.asarray(rotvec, dtype=float)), translation)

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self._R
        M[:3, 3] = self.translation
        return M

    def rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.rotation)

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return float(2.0 * np.arctan2(np.linalg.norm(self.rotation[1:]), abs(self.rotation[0])))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self._R.T + self.translation

    def inverse(self) -> PoseSE3:
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return PoseSE3(q, -(self._R.T @ self.translation))

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return compose(self, other)

    def interpolate(self, s: float) -> PoseSE3:
        """Pose at fraction ``s`` of the way from identity to ``self``.

        Rotation follows the geodesic (slerp from identity), translation is
        linear.
        """
        return PoseSE3(rotvec_to_quat(s * self.rotvec()), s * self.translation)

    def __repr__(self) -> str:
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"PoseSE3(q={q}, t={t})"


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Return ``a * b``: applies ``b`` then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    return PoseSE3(q, a.R @ b.translation + a.translation)


def inverse(p: PoseSE3) -> PoseSE3:
    return p.inverse()


def pose_error(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """(translation error in meters, rotation error in radians) between two poses."""
    d = compose(inverse(a), b)
    return float(np.linalg.norm(a.translation - b.translation)), d.angle()


def retract(T: PoseSE3, delta: np.ndarray) -> PoseSE3:
    """Apply a solver step ``(omega, v)`` to ``T``."""
    delta = np.asarray(delta, dtype=float)
    q = quat_multiply(rotvec_to_quat(delta[:3]), T.rotation)
    return PoseSE3(q, T.translation + delta[3:])


# ---------------------------------------------------------------------------
# residual blocks

ResidualKind = Literal["point_to_line", "point_to_plane"]


@dataclass(frozen=True, eq=False)
class ResidualBlock:
    kind: ResidualKind
    source_point: np.ndarray
    anchor_points: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        src = _frozen(np.asarray(self.source_point, dtype=float).reshape(3))
        anchors = _frozen(np.asarray(self.anchor_points, dtype=float).reshape(-1, 3))
        expected = {"point_to_line": 2, "point_to_plane": 3}.get(self.kind)
        if expected is None:
            raise ValueError(f"unknown residual kind {self.kind!r}")
        if anchors.shape[0] != expected:
            raise ValueError(f"{self.kind} needs {expected} anchors, got {anchors.shape[0]}")
        if not self.weight >= 0:
            raise ValueError("weight must be non-negative")
        object.__setattr__(self, "source_point", src)
        object.__setattr__(self, "anchor_points", anchors)
        object.__setattr__(self, "weight", float(self.weight))


def plane_normal(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Unit normal of the plane through three anchors, ``(a-b) x (a-c)`` normalized."""
    n = np.cross(a - b, a - c)
    norm = np.linalg.norm(n)
    if norm <= PLANE_ANCHOR_EPS:
        raise DegenerateAnchors("plane anchors are collinear")
    return n / norm


def point_to_line_residual(block: ResidualBlock, T: PoseSE3) -> float:
    a, b = block.anchor_points
    ab = np.linalg.norm(a - b)
    if ab <= LINE_ANCHOR_EPS:
        raise DegenerateAnchors("line anchors coincide")
    p = T.apply(block.source_point)
    return float(np.linalg.norm(np.cross(p - a, p - b)) / ab)


def point_to_plane_residual(block: ResidualBlock, T: PoseSE3) -> float:
    a, b, c = block.anchor_points
    n = plane_normal(a, b, c)
    return float(n @ (T.apply(block.source_point) - a))


def residual(block: ResidualBlock, T: PoseSE3) -> float:
    if block.kind == "point_to_line":
        return point_to_line_residual(block, T)
    return point_to_plane_residual(block, T)


class BlockBatch:
    """Stacked residual geometry for vectorized evaluation.

    Built once per solve; degenerate blocks raise ``DegenerateAnchors``.
    """

    def __init__(self, blocks: Sequence[ResidualBlock]):
        lines = [b for b in blocks if b.kind == "point_to_line"]
        planes = [b for b in blocks if b.kind == "point_to_plane"]
        self.n_line = len(lines)
        self.n_plane = len(planes)

        def stack(items, attr, shape):
            if not items:
                return np.zeros((0,) + shape)
            return np.array([getattr(b, attr) for b in items], dtype=float)

        self.line_src = stack(lines, "source_point", (3,))
        anchors = stack(lines, "anchor_points", (2, 3))
        self.line_a = anchors[:, 0]
        self.line_b = anchors[:, 1]
        self.line_w = np.array([b.weight for b in lines], dtype=float)
        self.line_c = self.line_a - self.line_b
        self.line_len = np.linalg.norm(self.line_c, axis=1)
        if np.any(self.line_len <= LINE_ANCHOR_EPS):
            raise DegenerateAnchors("line anchors coincide")

        self.plane_src = stack(planes, "source_point", (3,))
        anchors = stack(planes, "anchor_points", (3, 3))
        self.plane_a = anchors[:, 0]
        n = np.cross(anchors[:, 0] - anchors[:, 1], anchors[:, 0] - anchors[:, 2])
        nn = np.linalg.norm(n, axis=1)
        if np.any(nn <= PLANE_ANCHOR_EPS):
            raise DegenerateAnchors("plane anchors are collinear")
        self.plane_n = n / nn[:, None] if len(nn) else n
        self.plane_w = np.array([b.weight for b in planes], dtype=float)

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([self.line_w, self.plane_w])

    def __len__(self) -> int:
        return self.n_line + self.n_plane

    def residuals(self, T: PoseSE3) -> np.ndarray:
        """Unweighted residuals, lines first then planes."""
        p = T.apply(self.line_src)
        u = np.cross(p - self.line_a, p - self.line_b)
        f_line = np.linalg.norm(u, axis=1) / self.line_len
        q = T.apply(self.plane_src)
        f_plane = np.einsum("ij,ij->i", self.plane_n, q - self.plane_a)
        return np.concatenate([f_line, f_plane])

    def linearize(self, T: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
        """Unweighted residuals and their (N, 6) Jacobian w.r.t. ``(omega, v)``."""
        q_line = self.line_src @ T.R.T
        p = q_line + T.translation
        u = np.cross(p - self.line_a, p - self.line_b)
        un = np.linalg.norm(u, axis=1)
        f_line = un / self.line_len
        # d|u|/dp = (c x u) / |u| with c = a - b; zero where the point sits on the line
        g_line = np.zeros_like(u)
        ok = un > 1e-15
        g_line[ok] = np.cross(self.line_c[ok], u[ok]) / (un[ok] * self.line_len[ok])[:, None]

        q_plane = self.plane_src @ T.R.T
        f_plane = np.einsum("ij,ij->i", self.plane_n, q_plane + T.translation - self.plane_a)
        g_plane = self.plane_n

        q = np.vstack([q_line, q_plane])
        g = np.vstack([g_line, g_plane])
        J = np.hstack([np.cross(q, g), g])
        return np.concatenate([f_line, f_plane]), J

    def cost(self, T: PoseSE3) -> float:
        f = self.residuals(T)
        return float(self.weights @ (f * f))


def residual_jacobian(block: ResidualBlock, T: PoseSE3) -> np.ndarray:
    """Analytic 6-vector derivative of the block's residual w.r.t. a solver step."""
    _, J = BlockBatch([block]).linearize(T)
    return J[0]


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class SolverOptions:
    max_iterations: int = 4
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_retries: int = 10
    step_tolerance: float = 1e-10
    relative_cost_tolerance: float = 1e-8
    # costs at or below this are numerically zero (roundoff of exact fits)
    absolute_cost_tolerance: float = 1e-20
    min_residuals: int = 6
    # steps longer than this (in the stacked rotation/translation vector) are
    # rejected like a cost increase, which raises the damping
    max_step_norm: float = np.inf


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    reason: str
    residual_count: int
    cost_history: list[float] = field(default_factory=list)
    rejected_steps: int = 0


def lm_solve(
    blocks: Sequence[ResidualBlock] | BlockBatch,
    T0: PoseSE3,
    opts: SolverOptions | None = None,
) -> tuple[PoseSE3, SolveReport]:
    """Minimize ``sum(w_i * f_i**2)`` over the pose with damped Gauss-Newton steps.

    Each step solves ``(J^T J + lam * diag(J^T J)) delta = -J^T f`` on the
    weighted system. A step is kept only if it lowers the cost, so the cost is
    non-increasing across accepted iterations. ``iterations`` in the report
    counts accepted steps.
    """
    opts = opts or SolverOptions()
    batch = blocks if isinstance(blocks, BlockBatch) else BlockBatch(blocks)
    sw = np.sqrt(batch.weights)
    effective = int(np.count_nonzero(sw > 0))
    if effective < opts.min_residuals:
        raise UnderConstrained(f"{effective} effective residuals, need {opts.min_residuals}")

    T = T0
    f, J = batch.linearize(T)
    f = f * sw
    J = J * sw[:, None]
    cost = float(f @ f)
    initial_cost = cost
    history = [cost]
    if cost <= opts.absolute_cost_tolerance:
        return T, SolveReport(0, cost, cost, "zero_cost", effective, history)

    lam = opts.initial_lambda
    accepted = 0
    rejected = 0
    reason = "max_iterations"
    for _ in range(opts.max_iterations):
        A = J.T @ J
        b = -(J.T @ f)
        d = np.diag(A).copy()
        # unobservable directions have a zero diagonal; give them a tiny floor
        d = np.maximum(d, 1e-12 * max(float(d.max()), 1e-300))
        step_taken = False
        solved_any = False
        for _retry in range(opts.max_retries):
            try:
                delta = np.linalg.solve(A + lam * np.diag(d), b)
            except np.linalg.LinAlgError:
                lam *= opts.lambda_up
                continue
            if not np.all(np.isfinite(delta)):
                lam *= opts.lambda_up
                continue
            solved_any = True
            if np.linalg.norm(delta) > opts.max_step_norm:
                lam *= opts.lambda_up
                rejected += 1
                continue
            T_new = retract(T, delta)
            f_new = batch.residuals(T_new) * sw
            cost_new = float(f_new @ f_new)
            if cost_new < cost:
                step_taken = True
                break
            lam *= opts.lambda_up
            rejected += 1
        if not solved_any:
            raise SingularNormalEquations("normal equations stayed singular after damping retries")
        if not step_taken:
            reason = "no_decrease"
            break
        accepted += 1
        decrease = cost - cost_new
        T = T_new
        cost = cost_new
        history.append(cost)
        lam = max(lam / opts.lambda_down, 1e-12)
        if np.linalg.norm(delta) < opts.step_tolerance:
            reason = "small_step"
            break
        if decrease < opts.relative_cost_tolerance * (cost + decrease):
            reason = "small_decrease"
            break
        if cost <= opts.absolute_cost_tolerance:
            reason = "zero_cost"
            break
        f, J = batch.linearize(T)
        f = f * sw
        J = J * sw[:, None]
    return T, SolveReport(accepted, initial_cost, cost, reason, effective, history, rejected)


def solve_cost(blocks: Sequence[ResidualBlock] | BlockBatch, T: PoseSE3) -> float:
    batch = blocks if isinstance(blocks, BlockBatch) else BlockBatch(blocks)
    return batch.cost(T)
