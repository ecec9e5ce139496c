"""Keyframed pose graph: nodes, edge types, residuals and their Jacobians.

Residuals follow ``r = log(measured^-1 * expected)`` with the expected
measurement of an edge ``(a, b)`` being ``X_a^-1 X_b``.  All residual and
Jacobian vectors use the ``(rotation, translation)`` ordering of
:mod:`twoview_pgo.se3`.

The scalar cost of the graph is::

    F = 1/2 * sum_quadratic |r|^2_info + sum_robust rho(|r|^2_info)

with ``rho`` the Cauchy loss of :func:`cauchy_weight`.  ``rho(s) ~ s/2`` for
small ``s``, so robust and quadratic edges agree near zero error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import kernels
from .errors import DegenerateGeometryError, GraphStructureError, ParameterError
from .se3 import Pose, pose_exp, pose_log, relative_pose, rot_log

DEGENERATE_TRANSLATION = 1e-6


def make_information(values) -> np.ndarray:
    """Build a 6x6 information matrix from a 6-diagonal or a full matrix."""
    m = np.asarray(values, dtype=float)
    if m.shape == (6,):
        m = np.diag(m)
    if m.shape != (6, 6):
        raise ParameterError(f"information must be a 6-vector or 6x6, got {m.shape}")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ParameterError("information matrix is not symmetric")
    m = 0.5 * (m + m.T)
    if np.linalg.eigvalsh(m).min() <= 0.0:
        raise ParameterError("information matrix is not positive definite")
    return m


def information_from_sigmas(rot_sigma, trans_sigma) -> np.ndarray:
    """Diagonal information for independent rotation / translation noise."""
    rs = np.broadcast_to(np.asarray(rot_sigma, dtype=float), (3,))
    ts = np.broadcast_to(np.asarray(trans_sigma, dtype=float), (3,))
    return make_information(1.0 / np.concatenate([rs, ts]) ** 2)


@dataclass
class GraphNode:
    id: int
    estimate: Pose
    timestamp: float = 0.0


@dataclass
class PriorEdge:
    node: int
    anchor: Pose
    info: np.ndarray

    robust = False

    @property
    def endpoints(self):
        return (self.node,)


@dataclass
class OdometryEdge:
    source: int
    target: int
    measurement: Pose
    info: np.ndarray

    robust = False

    @property
    def endpoints(self):
        return (self.source, self.target)


@dataclass
class AbsoluteLoopEdge:
    source: int
    target: int
    measurement: Pose
    info: np.ndarray
    robust: bool = True

    @property
    def endpoints(self):
        return (self.source, self.target)


@dataclass
class ScaleFreeLoopEdge:
    """Loop closure constraining relative rotation and translation direction.

    ``direction`` is the unit bearing of the target origin seen from the
    source frame.
    """

    source: int
    target: int
    rotation: np.ndarray
    direction: np.ndarray
    info: np.ndarray
    robust: bool = True

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ParameterError("scale-free direction must be unit norm")
        self.direction = d

    @property
    def endpoints(self):
        return (self.source, self.target)


Edge = Union[PriorEdge, OdometryEdge, AbsoluteLoopEdge, ScaleFreeLoopEdge]
LOOP_EDGES = (AbsoluteLoopEdge, ScaleFreeLoopEdge)


@dataclass
class PoseGraph:
    nodes: dict[int, GraphNode] = field(default_factory=dict)
    edges: list = field(default_factory=list)

    def add_node(self, node: GraphNode) -> "PoseGraph":
        if node.id in self.nodes:
            raise GraphStructureError(f"duplicate node id {node.id}")
        if self.nodes and node.id <= self.last_id:
            raise GraphStructureError(
                f"node ids must increase: {node.id} after {self.last_id}")
        if not np.all(np.isfinite(node.estimate.matrix())):
            raise GraphStructureError(f"node {node.id} has a non-finite estimate")
        self.nodes[node.id] = node
        return self

    def add_edge(self, edge: Edge) -> "PoseGraph":
        for n in edge.endpoints:
            if n not in self.nodes:
                raise GraphStructureError(f"edge endpoint {n} does not exist")
        if isinstance(edge, PriorEdge) and self.prior is not None:
            raise GraphStructureError("graph already has a prior edge")
        if isinstance(edge, OdometryEdge) and edge.target != self._next_id(edge.source):
            raise GraphStructureError(
                f"odometry edge {edge.source}->{edge.target} is not between consecutive nodes")
        if isinstance(edge, LOOP_EDGES) and abs(self.index(edge.target) - self.index(edge.source)) < 2:
            raise GraphStructureError(
                f"loop edge {edge.source}->{edge.target} joins consecutive nodes")
        self.edges.append(edge)
        return self

    @property
    def last_id(self) -> int:
        return next(reversed(self.nodes))

    @property
    def prior(self):
        for e in self.edges:
            if isinstance(e, PriorEdge):
                return e
        return None

    def ids(self) -> list[int]:
        return list(self.nodes)

    def index(self, node_id) -> int:
        return self.ids().index(node_id)

    def _next_id(self, node_id):
        ids = self.ids()
        i = ids.index(node_id)
        return ids[i + 1] if i + 1 < len(ids) else None

    def estimates(self) -> dict[int, Pose]:
        return {i: n.estimate for i, n in self.nodes.items()}

    def set_estimates(self, estimates) -> None:
        for i, p in estimates.items():
            self.nodes[i].estimate = p

    def loop_edges(self) -> list:
        return [e for e in self.edges if isinstance(e, LOOP_EDGES)]

    def validate(self) -> None:
        """Check the chain invariant and edge endpoints."""
        ids = self.ids()
        chain = {(e.source, e.target) for e in self.edges if isinstance(e, OdometryEdge)}
        for a, b in zip(ids, ids[1:]):
            if (a, b) not in chain:
                raise GraphStructureError(f"nodes {a} and {b} are not joined by odometry")
        for e in self.edges:
            for n in e.endpoints:
                if n not in self.nodes:
                    raise GraphStructureError(f"edge endpoint {n} does not exist")


def add_node(graph: PoseGraph, node: GraphNode) -> PoseGraph:
    return graph.add_node(node)


def add_edge(graph: PoseGraph, edge) -> PoseGraph:
    return graph.add_edge(edge)


# residuals -------------------------------------------------------------------

def residual_absolute(expected: Pose, measured: Pose) -> np.ndarray:
    return pose_log(relative_pose(measured, expected))


def residual_prior(estimate: Pose, anchor: Pose) -> np.ndarray:
    return residual_absolute(estimate, anchor)


def normalize_translation(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    n = float(np.linalg.norm(t))
    if n > 0.0:
        return t / n
    return np.zeros(3)


def residual_scale_free(expected: Pose, edge: ScaleFreeLoopEdge) -> np.ndarray:
    rot = rot_log(edge.rotation.T @ expected.R)
    return np.concatenate([rot, edge.direction - normalize_translation(expected.t)])


def expected_measurement(edge, estimates) -> Pose:
    if isinstance(edge, PriorEdge):
        return estimates[edge.node]
    return relative_pose(estimates[edge.source], estimates[edge.target])


def edge_residual(edge, estimates) -> np.ndarray:
    expected = expected_measurement(edge, estimates)
    if isinstance(edge, PriorEdge):
        return residual_prior(expected, edge.anchor)
    if isinstance(edge, ScaleFreeLoopEdge):
        return residual_scale_free(expected, edge)
    return residual_absolute(expected, edge.measurement)


def cauchy_weight(squared_error: float, scale: float) -> tuple[float, float]:
    """Cauchy loss ``rho(s) = c^2/2 ln(1 + s/c^2)`` and its derivative."""
    if not scale > 0.0:
        raise ParameterError(f"Cauchy scale must be positive, got {scale}")
    if squared_error < 0.0:
        raise ParameterError("squared error must be non-negative")
    c2 = scale * scale
    loss = 0.5 * c2 * math.log1p(squared_error / c2)
    weight = 1.0 / (2.0 * (1.0 + squared_error / c2))
    return loss, weight


# jacobians -------------------------------------------------------------------

def _analytic_jacobians(edge, estimates, backend=None):
    if isinstance(edge, PriorEdge):
        x = estimates[edge.node]
        _, _, jb = kernels.absolute_terms(
            np.eye(3)[None], np.zeros((1, 3)), x.R[None], x.t[None],
            edge.anchor.R[None], edge.anchor.t[None], backend=backend)
        return (jb[0],)
    a, b = estimates[edge.source], estimates[edge.target]
    if isinstance(edge, ScaleFreeLoopEdge):
        _, ja, jb, norm = kernels.scale_free_terms(
            a.R[None], a.t[None], b.R[None], b.t[None],
            edge.rotation[None], edge.direction[None], backend=backend)
        if norm[0] < DEGENERATE_TRANSLATION:
            raise DegenerateGeometryError(
                f"scale-free edge {edge.source}->{edge.target}: expected translation "
                f"norm {norm[0]:.3g} is too small to normalize")
        return ja[0], jb[0]
    m = edge.measurement
    _, ja, jb = kernels.absolute_terms(
        a.R[None], a.t[None], b.R[None], b.t[None], m.R[None], m.t[None], backend=backend)
    return ja[0], jb[0]


def _numeric_jacobians(edge, estimates, h=1e-6):
    out = []
    for node in edge.endpoints:
        J = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            plus = dict(estimates)
            minus = dict(estimates)
            plus[node] = estimates[node] @ pose_exp(d)
            minus[node] = estimates[node] @ pose_exp(-d)
            J[:, k] = (edge_residual(edge, plus) - edge_residual(edge, minus)) / (2.0 * h)
        out.append(J)
    return tuple(out)


def edge_jacobians(edge, estimates, method="analytic", backend=None):
    """Jacobians of the edge residual w.r.t. right perturbations of each endpoint.

    Returns one 6x6 matrix per endpoint, in ``edge.endpoints`` order.
    ``method="numeric"`` uses central differences with step 1e-6.
    """
    for n in edge.endpoints:
        if n not in estimates:
            raise GraphStructureError(f"edge endpoint {n} has no estimate")
    if method == "analytic":
        return _analytic_jacobians(edge, estimates, backend)
    if method == "numeric":
        if isinstance(edge, ScaleFreeLoopEdge):
            t = expected_measurement(edge, estimates).t
            if np.linalg.norm(t) < DEGENERATE_TRANSLATION:
                raise DegenerateGeometryError("scale-free edge with near-zero expected translation")
        return _numeric_jacobians(edge, estimates)
    raise ParameterError(f"unknown Jacobian method {method!r}")


def chain_from_poses(poses, timestamps=None, odometry_info=None, prior_info=None) -> PoseGraph:
    """Graph with one node per pose, odometry edges from the poses themselves
    and a prior on the first node."""
    odometry_info = make_information(np.full(6, 1e4)) if odometry_info is None else odometry_info
    prior_info = make_information(np.full(6, 1e8)) if prior_info is None else prior_info
    g = PoseGraph()
    for i, p in enumerate(poses):
        ts = float(timestamps[i]) if timestamps is not None else float(i)
        g.add_node(GraphNode(i, p, ts))
    g.add_edge(PriorEdge(0, poses[0], prior_info))
    for i in range(1, len(poses)):
        g.add_edge(OdometryEdge(i - 1, i, relative_pose(poses[i - 1], poses[i]), odometry_info))
    return g


__all__ = [
    "AbsoluteLoopEdge", "GraphNode", "OdometryEdge", "PoseGraph", "PriorEdge",
    "ScaleFreeLoopEdge", "add_edge", "add_node", "cauchy_weight", "chain_from_poses",
    "edge_jacobians", "edge_residual", "expected_measurement", "information_from_sigmas",
    "make_information", "normalize_translation", "residual_absolute", "residual_prior",
    "residual_scale_free",
]
