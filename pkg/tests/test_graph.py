import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import fd_right, random_pose, res_absolute, res_scale_free
from twoview_pgo.errors import DegenerateGeometryError, GraphStructureError, ParameterError
from twoview_pgo.graph import (
    AbsoluteLoopEdge, GraphNode, OdometryEdge, PoseGraph, PriorEdge, ScaleFreeLoopEdge,
    add_edge, add_node, cauchy_weight, chain_from_poses, edge_jacobians, edge_residual,
    information_from_sigmas, make_information, normalize_translation, residual_absolute,
    residual_prior, residual_scale_free,
)
from twoview_pgo.se3 import Pose, pose_exp, pose_log, relative_pose, rot_exp, rot_log

INFO = np.eye(6)


def _sf(rotation, direction, a=0, b=2):
    return ScaleFreeLoopEdge(a, b, rotation, direction, INFO)


def test_residual_absolute_zero():
    rng = np.random.default_rng(0)
    p = random_pose(rng)
    np.testing.assert_allclose(residual_absolute(p, p), 0, atol=1e-15)


def test_residual_absolute_first_order():
    rng = np.random.default_rng(1)
    m = random_pose(rng)
    xi = rng.normal(size=6) * 1e-4
    np.testing.assert_allclose(residual_absolute(m @ pose_exp(xi), m), xi, atol=1e-12)


def test_residual_absolute_pure_translation():
    r = residual_absolute(Pose(np.eye(3), [1, 0, 0]), Pose.identity())
    np.testing.assert_array_equal(r, [0, 0, 0, 1, 0, 0])


def test_residual_prior_cases():
    rng = np.random.default_rng(2)
    a, b = random_pose(rng), random_pose(rng)
    np.testing.assert_allclose(residual_prior(a, a), 0, atol=1e-15)
    xi = rng.normal(size=6) * 1e-4
    np.testing.assert_allclose(residual_prior(pose_exp(xi), Pose.identity()), xi, atol=1e-15)
    np.testing.assert_array_equal(residual_prior(a, b), residual_absolute(a, b))


def test_normalize_translation():
    np.testing.assert_allclose(normalize_translation([3, 4, 0]), [0.6, 0.8, 0])
    np.testing.assert_array_equal(normalize_translation([0, 0, 0]), [0, 0, 0])
    np.testing.assert_array_equal(normalize_translation([0, 0, -2]), [0, 0, -1])


def test_residual_scale_free_examples():
    rng = np.random.default_rng(3)
    R = rot_exp(rng.normal(size=3))
    d = np.array([1.0, 2.0, 2.0]) / 3.0
    np.testing.assert_allclose(residual_scale_free(Pose(R, 5 * d), _sf(R, d)), 0, atol=1e-15)
    r = residual_scale_free(Pose(np.eye(3), [0, 1, 0]), _sf(np.eye(3), [1, 0, 0]))
    np.testing.assert_array_equal(r, [0, 0, 0, 1, -1, 0])


def test_residual_scale_free_matches_direct_formula():
    rng = np.random.default_rng(4)
    for _ in range(20):
        exp_pose = random_pose(rng)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        Rm = random_pose(rng).R
        r = residual_scale_free(exp_pose, _sf(Rm, d))
        t = exp_pose.t
        norm = math.sqrt(t[0] ** 2 + t[1] ** 2 + t[2] ** 2)
        trans = [d[i] - t[i] / norm for i in range(3)]
        oracle = res_scale_free(np.eye(4), exp_pose.matrix(), Rm, d)
        np.testing.assert_allclose(r[3:], trans, atol=1e-15)
        np.testing.assert_allclose(r, oracle, atol=1e-9)


@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0, 1000.0])
def test_residual_scale_free_scale_invariance(lam):
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = random_pose(rng)
        d = rng.normal(size=3)
        edge = _sf(random_pose(rng).R, d / np.linalg.norm(d))
        base = residual_scale_free(p, edge)
        scaled = residual_scale_free(Pose(p.R, lam * p.t), edge)
        assert np.max(np.abs(base - scaled)) < 1e-12


def test_gauge_invariance_of_absolute_residual():
    rng = np.random.default_rng(6)
    a, b, m, G = (random_pose(rng) for _ in range(4))
    r1 = residual_absolute(relative_pose(a, b), m)
    r2 = residual_absolute(relative_pose(G @ a, G @ b), m)
    np.testing.assert_allclose(r1, r2, atol=1e-12)


def test_cauchy_examples():
    assert cauchy_weight(0.0, 1.0) == (0.0, 0.5)
    loss, _ = cauchy_weight(4.0, 2.0)
    assert loss == pytest.approx(2.0 * math.log(2.0), abs=1e-15)
    loss, w = cauchy_weight(9.0, 1.0)
    assert loss == pytest.approx(0.5 * math.log(10.0), abs=1e-15)
    assert w == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(ParameterError):
        cauchy_weight(1.0, 0.0)
    with pytest.raises(ParameterError):
        cauchy_weight(1.0, -1.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 1e8), st.floats(1e-3, 1e3))
def test_cauchy_bounded_by_quadratic_and_monotone(s, c):
    loss, w = cauchy_weight(s, c)
    assert 0.0 <= loss <= 0.5 * s * (1 + 1e-12) + 1e-300
    loss2, w2 = cauchy_weight(s * 1.5 + 1e-9, c)
    assert loss2 >= loss
    assert w2 <= w  # concave: derivative non-increasing


def _random_config(rng, kind):
    a, b = random_pose(rng), random_pose(rng)
    est = {0: a, 2: b}
    if kind == "prior":
        return PriorEdge(0, random_pose(rng), INFO), est
    if kind == "abs":
        m = relative_pose(a, b) @ pose_exp(rng.normal(size=6) * 0.3)
        return AbsoluteLoopEdge(0, 2, m, INFO), est
    d = rng.normal(size=3)
    Rm = relative_pose(a, b).R @ rot_exp(rng.normal(size=3) * 0.3)
    return ScaleFreeLoopEdge(0, 2, Rm, d / np.linalg.norm(d), INFO), est


def _oracle_jacobians(edge, est):
    if isinstance(edge, PriorEdge):
        return fd_right(lambda X: res_absolute(np.eye(4), X, edge.anchor.matrix()),
                        [est[0].matrix()])
    Ms = [est[0].matrix(), est[2].matrix()]
    if isinstance(edge, ScaleFreeLoopEdge):
        return fd_right(lambda A, B: res_scale_free(A, B, edge.rotation, edge.direction), Ms)
    return fd_right(lambda A, B: res_absolute(A, B, edge.measurement.matrix()), Ms)


@pytest.mark.parametrize("kind", ["prior", "abs", "sf"])
def test_jacobians_match_independent_finite_differences(kind):
    rng = np.random.default_rng(7)
    for _ in range(20):
        edge, est = _random_config(rng, kind)
        for J, O in zip(edge_jacobians(edge, est), _oracle_jacobians(edge, est)):
            assert np.max(np.abs(J - O)) < 1e-5


@pytest.mark.parametrize("kind", ["prior", "abs", "sf"])
def test_jacobian_backends_agree(kind):
    rng = np.random.default_rng(8)
    edge, est = _random_config(rng, kind)
    an = edge_jacobians(edge, est)
    nu = edge_jacobians(edge, est, method="numeric")
    py = edge_jacobians(edge, est, backend="python")
    for a, n, p in zip(an, nu, py):
        assert np.max(np.abs(a - n)) < 1e-5
        np.testing.assert_allclose(a, p, atol=1e-12)


def test_absolute_translation_block_rank_at_zero_residual():
    rng = np.random.default_rng(9)
    a, b = random_pose(rng), random_pose(rng)
    edge = AbsoluteLoopEdge(0, 2, relative_pose(a, b), INFO)
    for J in edge_jacobians(edge, {0: a, 2: b}):
        assert np.linalg.matrix_rank(J[3:, 3:]) == 3


def test_scale_free_ray_direction_is_null():
    rng = np.random.default_rng(10)
    a, b = random_pose(rng), random_pose(rng)
    rel = relative_pose(a, b)
    edge = ScaleFreeLoopEdge(0, 2, rel.R, normalize_translation(rel.t), INFO)
    est = {0: a, 2: b}
    np.testing.assert_allclose(edge_residual(edge, est), 0, atol=1e-14)
    _, Jb = edge_jacobians(edge, est)
    # sliding b along the ray: translation perturbation in b's frame along R_ab^T d
    tangent = np.concatenate([np.zeros(3), rel.R.T @ edge.direction])
    assert np.max(np.abs(Jb @ tangent)) < 1e-9


def test_scale_free_degenerate_translation_raises():
    a = Pose.identity()
    b = Pose(rot_exp([0.1, 0, 0]), [1e-8, 0, 0])
    edge = ScaleFreeLoopEdge(0, 2, np.eye(3), [1, 0, 0], INFO)
    for method in ("analytic", "numeric"):
        with pytest.raises(DegenerateGeometryError):
            edge_jacobians(edge, {0: a, 2: b}, method=method)


def test_jacobian_requires_endpoints():
    edge = AbsoluteLoopEdge(0, 2, Pose.identity(), INFO)
    with pytest.raises(GraphStructureError):
        edge_jacobians(edge, {0: Pose.identity()})


# information ---------------------------------------------------------------------

def test_information_diag_and_full():
    np.testing.assert_array_equal(make_information(np.arange(1, 7)), np.diag(np.arange(1, 7)))
    full = np.eye(6) * 2
    full[0, 1] = full[1, 0] = 0.5
    np.testing.assert_array_equal(make_information(full), full)
    with pytest.raises(ParameterError):
        make_information(np.zeros(6))
    bad = np.eye(6)
    bad[0, 1] = 1.0
    with pytest.raises(ParameterError):
        make_information(bad)
    info = information_from_sigmas(0.02, 0.05)
    np.testing.assert_allclose(np.diag(info), [2500] * 3 + [400] * 3)


# structure -------------------------------------------------------------------------

def test_add_node_then_prior():
    g = PoseGraph()
    add_node(g, GraphNode(0, Pose.identity()))
    add_edge(g, PriorEdge(0, Pose.identity(), INFO))
    g.validate()
    assert g.prior is not None


def test_structural_errors():
    g = PoseGraph()
    with pytest.raises(GraphStructureError):
        g.add_edge(PriorEdge(0, Pose.identity(), INFO))
    g.add_node(GraphNode(0, Pose.identity()))
    with pytest.raises(GraphStructureError):
        g.add_node(GraphNode(0, Pose.identity()))
    g.add_node(GraphNode(1, Pose.identity()))
    with pytest.raises(GraphStructureError):
        g.add_node(GraphNode(1, Pose.identity()))
    g.add_edge(PriorEdge(0, Pose.identity(), INFO))
    with pytest.raises(GraphStructureError):
        g.add_edge(PriorEdge(1, Pose.identity(), INFO))
    with pytest.raises(GraphStructureError):
        g.add_edge(OdometryEdge(0, 5, Pose.identity(), INFO))
    g.add_node(GraphNode(2, Pose.identity()))
    with pytest.raises(GraphStructureError):
        g.add_edge(OdometryEdge(0, 2, Pose.identity(), INFO))
    with pytest.raises(GraphStructureError):
        g.add_edge(AbsoluteLoopEdge(1, 2, Pose.identity(), INFO))
    with pytest.raises(GraphStructureError):
        g.add_node(GraphNode(3, Pose(np.eye(3), [np.nan, 0, 0])))
    with pytest.raises(ParameterError):
        ScaleFreeLoopEdge(0, 2, np.eye(3), [1, 1, 0], INFO)


def test_validate_detects_broken_chain():
    g = PoseGraph()
    for i in range(3):
        g.add_node(GraphNode(i, Pose.identity()))
    g.add_edge(OdometryEdge(0, 1, Pose.identity(), INFO))
    with pytest.raises(GraphStructureError):
        g.validate()


def test_hundred_node_chain():
    rng = np.random.default_rng(11)
    poses = [random_pose(rng) for _ in range(100)]
    g = chain_from_poses(poses)
    g.validate()
    odo = [e for e in g.edges if isinstance(e, OdometryEdge)]
    assert len(odo) == 99
    assert [(e.source, e.target) for e in odo] == [(i, i + 1) for i in range(99)]
    total = sum(float(np.sum(edge_residual(e, g.estimates()) ** 2)) for e in g.edges)
    assert total < 1e-18


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1, 1)),
       arrays(np.float64, 6, elements=st.floats(-1, 1)))
def test_residuals_zero_at_generating_configuration(xa, xb):
    a, b = pose_exp(xa), pose_exp(xb) @ Pose(np.eye(3), [0.5, 0, 0])
    rel = relative_pose(a, b)
    est = {0: a, 2: b}
    abs_edge = AbsoluteLoopEdge(0, 2, rel, INFO)
    sf_edge = ScaleFreeLoopEdge(0, 2, rel.R, normalize_translation(rel.t), INFO)
    assert np.sum(edge_residual(abs_edge, est) ** 2) < 1e-18
    assert np.sum(edge_residual(sf_edge, est) ** 2) < 1e-18
    assert np.linalg.norm(pose_log(relative_pose(rel, rel))) == 0.0
    assert np.linalg.norm(rot_log(rel.R.T @ rel.R)) < 1e-15
