"""Trajectory evaluation: rigid alignment, RMSE ATE, loop-edge errors."""
from __future__ import annotations

import numpy as np

from .errors import EvaluationError
from .graph import AbsoluteLoopEdge, ScaleFreeLoopEdge, normalize_translation
from .se3 import Pose, relative_pose, rotation_angle

ASSOCIATION_WINDOW = 0.02  # seconds


def associate(est_times, ref_times, max_dt=ASSOCIATION_WINDOW):
    """Index pairs ``(i, j)`` matching each estimate to its nearest reference stamp."""
    est_times = np.asarray(est_times, dtype=float)
    ref_times = np.asarray(ref_times, dtype=float)
    if ref_times.size == 0 or est_times.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    order = np.argsort(ref_times, kind="stable")
    sorted_ref = ref_times[order]
    pos = np.clip(np.searchsorted(sorted_ref, est_times), 1, len(sorted_ref) - 1) \
        if len(sorted_ref) > 1 else np.zeros(len(est_times), dtype=int)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(sorted_ref[left] - est_times) <= np.abs(sorted_ref[pos] - est_times),
                    left, pos)
    ok = np.abs(sorted_ref[pick] - est_times) <= max_dt
    return np.nonzero(ok)[0], order[pick[ok]]


def _positions(traj):
    return np.array([p.t for p in traj], dtype=float).reshape(-1, 3)


def align_points(src, dst) -> Pose:
    """Rigid ``G`` minimizing ``sum |G src_i - dst_i|^2`` (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3:
        raise EvaluationError(f"need at least 3 associated poses, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    if np.linalg.matrix_rank(a, tol=1e-9 * max(1.0, np.abs(a).max())) < 2:
        raise EvaluationError("associated positions are collinear; alignment is undetermined")
    U, _, Vt = np.linalg.svd(b.T @ a)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ S @ Vt
    return Pose(R, mu_d - R @ mu_s)


def align_6dof(estimated, reference, est_times=None, ref_times=None) -> Pose:
    """Alignment of ``estimated`` onto ``reference``.

    With timestamps the trajectories are associated by nearest stamp within
    0.02 s, otherwise index by index.
    """
    src, dst = _associated(estimated, reference, est_times, ref_times)
    return align_points(src, dst)


def _associated(estimated, reference, est_times, ref_times):
    src, dst = _positions(estimated), _positions(reference)
    if est_times is None or ref_times is None:
        if len(src) != len(dst):
            raise EvaluationError("trajectories differ in length and no timestamps were given")
        return src, dst
    i, j = associate(est_times, ref_times)
    return src[i], dst[j]


def rmse_ate(estimated, reference, est_times=None, ref_times=None, baseline=None):
    """``(ate, percent_decrease)``; the decrease is None without a baseline."""
    src, dst = _associated(estimated, reference, est_times, ref_times)
    G = align_points(src, dst)
    res = src @ G.R.T + G.t - dst
    ate = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    return ate, (percent_decrease(baseline, ate) if baseline is not None else None)


def percent_decrease(baseline: float, value: float) -> float:
    if not baseline > 0:
        raise EvaluationError("baseline must be positive")
    return 100.0 * (baseline - value) / baseline


def lc_edge_errors(edge, gt: dict) -> tuple[float, float]:
    """``(trans_error, rot_error)`` of a loop edge against ground truth.

    Absolute edges report translation error in meters, scale-free edges the
    angle in radians between measured and true direction.
    """
    true = relative_pose(gt[edge.source], gt[edge.target])
    if isinstance(edge, ScaleFreeLoopEdge):
        rot = rotation_angle(edge.rotation.T @ true.R)
        d, g = edge.direction, normalize_translation(true.t)
        return float(np.arctan2(np.linalg.norm(np.cross(d, g)), d @ g)), rot
    if isinstance(edge, AbsoluteLoopEdge):
        m = edge.measurement
        return float(np.linalg.norm(m.t - true.t)), rotation_angle(m.R.T @ true.R)
    raise EvaluationError(f"not a loop edge: {type(edge).__name__}")
