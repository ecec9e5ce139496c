import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from oracles import random_pose
from twoview_pgo.errors import EvaluationError
from twoview_pgo.evaluation import (
    align_6dof, associate, lc_edge_errors, percent_decrease, rmse_ate,
)
from twoview_pgo.graph import AbsoluteLoopEdge, ScaleFreeLoopEdge, make_information
from twoview_pgo.se3 import Pose, pose_exp, relative_pose, rot_exp

INFO = make_information(np.ones(6))


def _traj(rng, n=30):
    return [Pose(rot_exp(rng.normal(size=3)), rng.normal(size=3) * 5) for _ in range(n)]


def _oracle_alignment(src, dst):
    """Rigid alignment through scipy's Kabsch solver."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    rot, _ = Rotation.align_vectors(dst - mu_d, src - mu_s)
    R = rot.as_matrix()
    return R, mu_d - R @ mu_s


def test_self_alignment_is_identity():
    traj = _traj(np.random.default_rng(0))
    G = align_6dof(traj, traj)
    np.testing.assert_allclose(G.matrix(), np.eye(4), atol=1e-12)


def test_recovers_inverse_of_rigid_motion():
    rng = np.random.default_rng(1)
    traj = _traj(rng)
    G_star = random_pose(rng)
    moved = [G_star @ p for p in traj]
    G = align_6dof(moved, traj)
    np.testing.assert_allclose(G.matrix(), G_star.inverse().matrix(), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_alignment_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    ref = _traj(rng, 20)
    est = [Pose(p.R, p.t + rng.normal(size=3)) for p in ref]
    est = [pose_exp(rng.normal(size=6)) @ p for p in est]
    G = align_6dof(est, ref)
    src = np.array([p.t for p in est])
    dst = np.array([p.t for p in ref])
    R, t = _oracle_alignment(src, dst)
    np.testing.assert_allclose(G.R, R, atol=1e-9)
    np.testing.assert_allclose(G.t, t, atol=1e-8)


def test_too_few_or_collinear():
    p = [Pose.identity(), Pose(np.eye(3), [1, 0, 0])]
    with pytest.raises(EvaluationError):
        align_6dof(p, p)
    line = [Pose(np.eye(3), [i, 0, 0]) for i in range(5)]
    with pytest.raises(EvaluationError):
        align_6dof(line, line)


def test_association_window():
    i, j = associate([0.0, 1.01, 2.03], [0.0, 1.0, 2.0])
    assert list(i) == [0, 1] and list(j) == [0, 1]
    i, j = associate([5.0, 3.0], [3.015, 4.0, 5.0])
    assert list(i) == [0, 1] and list(j) == [2, 0]


def test_association_drives_alignment():
    rng = np.random.default_rng(2)
    ref = _traj(rng, 10)
    t_ref = np.arange(10.0)
    with pytest.raises(EvaluationError):
        rmse_ate(ref, ref, t_ref + 0.5, t_ref)
    ate, _ = rmse_ate(ref, ref, t_ref + 0.01, t_ref)
    assert ate < 1e-12


def test_percent_decrease_headline():
    assert percent_decrease(13.09, 1.40) == pytest.approx(89.3, abs=0.05)
    ate, dec = rmse_ate(_traj(np.random.default_rng(3)), _traj(np.random.default_rng(3)),
                        baseline=2.0)
    assert ate < 1e-12 and dec == pytest.approx(100.0)
    with pytest.raises(EvaluationError):
        percent_decrease(0.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_rmse_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    ref = _traj(rng, 15)
    est = [Pose(p.R, p.t + rng.normal(size=3) * 0.3) for p in ref]
    src = np.array([p.t for p in est])
    dst = np.array([p.t for p in ref])
    R, t = _oracle_alignment(src, dst)
    expected = np.sqrt(np.mean(np.sum((src @ R.T + t - dst) ** 2, axis=1)))
    ate, _ = rmse_ate(est, ref)
    assert ate == pytest.approx(expected, rel=1e-9)


def _gt_pair(rng):
    a = random_pose(rng)
    b = a @ Pose(rot_exp(rng.normal(size=3) * 0.3), rng.normal(size=3) * 3)
    return {0: a, 1: b}


def test_edge_errors_zero_for_exact_edges():
    gt = _gt_pair(np.random.default_rng(4))
    rel = relative_pose(gt[0], gt[1])
    assert lc_edge_errors(AbsoluteLoopEdge(0, 1, rel, INFO), gt) == pytest.approx((0, 0), abs=1e-7)
    sf = ScaleFreeLoopEdge(0, 1, rel.R, rel.t / np.linalg.norm(rel.t), INFO)
    assert lc_edge_errors(sf, gt) == pytest.approx((0, 0), abs=1e-7)


def test_scale_free_direction_five_degrees():
    gt = {0: Pose.identity(), 1: Pose(np.eye(3), [2.0, 0, 0])}
    d = rot_exp([0, 0, np.radians(5)]) @ np.array([1.0, 0, 0])
    te, re = lc_edge_errors(ScaleFreeLoopEdge(0, 1, np.eye(3), d, INFO), gt)
    assert np.degrees(te) == pytest.approx(5.0, abs=1e-10)
    assert re == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_edge_errors_match_trig_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = _gt_pair(rng)
    rel = relative_pose(gt[0], gt[1])
    noisy = rel @ pose_exp(rng.normal(size=6) * 0.1)
    te, re = lc_edge_errors(AbsoluteLoopEdge(0, 1, noisy, INFO), gt)
    assert te == pytest.approx(np.linalg.norm(noisy.t - rel.t), abs=1e-12)
    dR = Rotation.from_matrix(noisy.R.T @ rel.R).magnitude()
    assert re == pytest.approx(dR, abs=1e-9)
    d = noisy.t / np.linalg.norm(noisy.t)
    te, re = lc_edge_errors(ScaleFreeLoopEdge(0, 1, noisy.R, d, INFO), gt)
    g = rel.t / np.linalg.norm(rel.t)
    assert te == pytest.approx(np.arccos(np.clip(d @ g, -1, 1)), abs=1e-7)
    assert re == pytest.approx(dR, abs=1e-9)
