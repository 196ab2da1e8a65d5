"""Absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import NoOverlap
from .geometry import PoseSE3, matrix_to_quat
from .ingest import Trajectory

Alignment = Literal["none", "rigid"]


@dataclass(frozen=True, eq=False)
class AteReport:
    rmse: float
    errors: np.ndarray
    alignment: PoseSE3
    matched: int


def associate(
    estimate: Trajectory, truth: Trajectory, by: Literal["index", "timestamp"] = "index", max_dt: float = 0.02
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i_est, i_truth)`` of poses that belong together."""
    if by == "index":
        n = min(len(estimate), len(truth))
        idx = np.arange(n)
        return idx, idx
    if by != "timestamp":
        raise ValueError(f"unknown association {by!r}")
    ts = truth.timestamps
    if len(ts) == 0 or len(estimate) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    pos = np.clip(np.searchsorted(ts, estimate.timestamps), 1, max(len(ts) - 1, 1))
    left = np.clip(pos - 1, 0, len(ts) - 1)
    right = np.clip(pos, 0, len(ts) - 1)
    pick = np.where(
        np.abs(ts[left] - estimate.timestamps) <= np.abs(ts[right] - estimate.timestamps), left, right
    )
    ok = np.abs(ts[pick] - estimate.timestamps) <= max_dt
    # each truth pose is used once, by the closest estimate
    est_idx = np.flatnonzero(ok)
    tru_idx = pick[ok]
    dt = np.abs(ts[tru_idx] - estimate.timestamps[est_idx])
    order = np.lexsort((est_idx, dt))
    _, first = np.unique(tru_idx[order], return_index=True)
    chosen = np.sort(order[first])
    return est_idx[chosen], tru_idx[chosen]


def rigid_align(src: np.ndarray, dst: np.ndarray) -> PoseSE3:
    """Least-squares rotation and translation taking ``src`` onto ``dst`` (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return PoseSE3(matrix_to_quat(R), mu_d - R @ mu_s)


def ate_rmse(
    estimate: Trajectory,
    truth: Trajectory,
    align: Alignment = "rigid",
    by: Literal["index", "timestamp"] = "index",
    max_dt: float = 0.02,
) -> AteReport:
    ie, it = associate(estimate, truth, by, max_dt)
    if len(ie) == 0:
        raise NoOverlap("no estimated pose could be matched to the reference")
    est = estimate.positions()[ie]
    ref = truth.positions()[it]
    if align == "rigid":
        T = rigid_align(est, ref)
    elif align == "none":
        T = PoseSE3.identity()
    else:
        raise ValueError(f"unknown alignment {align!r}")
    errors = np.linalg.norm(T.apply(est) - ref, axis=1)
    return AteReport(float(np.sqrt(np.mean(errors**2))), errors, T, len(ie))
