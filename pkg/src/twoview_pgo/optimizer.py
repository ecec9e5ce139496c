"""Robust Levenberg-Marquardt over all node poses of a :class:`PoseGraph`.

Steps are computed on the 6N-dimensional tangent space and applied with the
right-multiplicative retraction ``X_i <- X_i exp(delta_i)``.  Loop-closure
edges flagged ``robust`` are down-weighted by iteratively reweighted least
squares with the Cauchy kernel; prior and odometry edges stay quadratic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import DegenerateGeometryError, GaugeError, NumericalError, ParameterError
from .graph import (
    DEGENERATE_TRANSLATION, AbsoluteLoopEdge, OdometryEdge, PoseGraph, PriorEdge,
    ScaleFreeLoopEdge,
)
from .se3 import Pose

log = logging.getLogger(__name__)


@dataclass
class SolverParams:
    max_iterations: int = 50
    cost_tolerance: float = 1e-10
    step_tolerance: float = 1e-10
    initial_damping: float = 1e-4
    cadence_l: int = 10
    robust: bool = True
    cauchy_scale: float = 1.0
    dense_threshold: int = 50

    def __post_init__(self):
        if self.max_iterations < 1 or self.cadence_l < 1:
            raise ParameterError("max_iterations and cadence_l must be >= 1")
        for name in ("cost_tolerance", "step_tolerance", "initial_damping", "cauchy_scale"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    cost_trace: list = field(default_factory=list)
    reason: str = ""

    def to_table(self) -> str:
        lines = [
            f"{'initial_cost':<14}{self.initial_cost:.6e}",
            f"{'final_cost':<14}{self.final_cost:.6e}",
            f"{'iterations':<14}{self.iterations}",
            f"{'converged':<14}{self.converged}",
            f"{'reason':<14}{self.reason}",
            "",
            f"{'step':>5}  {'cost':>14}",
        ]
        lines += [f"{k:>5}  {c:>14.6e}" for k, c in enumerate(self.cost_trace)]
        return "\n".join(lines)


def should_optimize(total_keyframes: int, keyframes_since_last_opt: int, l: int) -> bool:
    """Optimize once every ``max(1, floor(N / l))`` keyframes."""
    if total_keyframes < 1 or l < 1:
        raise ParameterError("need N >= 1 and l >= 1")
    return keyframes_since_last_opt >= max(1, total_keyframes // l)


class _Group:
    """Edges of one kind gathered into arrays."""

    def __init__(self, kind, edges, edge_ids, index):
        self.kind = kind
        self.edge_ids = np.asarray(edge_ids, dtype=int)
        n = len(edges)
        if kind == "prior":
            self.a = np.full(n, -1, dtype=int)
            self.b = np.array([index[e.node] for e in edges], dtype=int)
            self.Rm = np.array([e.anchor.R for e in edges]).reshape(n, 3, 3)
            self.vm = np.array([e.anchor.t for e in edges]).reshape(n, 3)
        else:
            self.a = np.array([index[e.source] for e in edges], dtype=int)
            self.b = np.array([index[e.target] for e in edges], dtype=int)
            if kind == "scale_free":
                self.Rm = np.array([e.rotation for e in edges]).reshape(n, 3, 3)
                self.vm = np.array([e.direction for e in edges]).reshape(n, 3)
            else:
                self.Rm = np.array([e.measurement.R for e in edges]).reshape(n, 3, 3)
                self.vm = np.array([e.measurement.t for e in edges]).reshape(n, 3)
        self.info = np.array([e.info for e in edges]).reshape(n, 6, 6)
        self.robust = np.array([bool(e.robust) for e in edges], dtype=bool)

    def terms(self, R, t, backend=None):
        if self.kind == "prior":
            n = len(self.b)
            Ra = np.broadcast_to(np.eye(3), (n, 3, 3))
            ta = np.zeros((n, 3))
        else:
            Ra, ta = R[self.a], t[self.a]
        Rb, tb = R[self.b], t[self.b]
        if self.kind == "scale_free":
            r, Ja, Jb, norm = kernels.scale_free_terms(Ra, ta, Rb, tb, self.Rm, self.vm, backend)
            return r, Ja, Jb, norm
        r, Ja, Jb = kernels.absolute_terms(Ra, ta, Rb, tb, self.Rm, self.vm, backend)
        return r, Ja, Jb, None


class _Problem:
    def __init__(self, graph: PoseGraph, params: SolverParams, backend=None):
        if graph.prior is None:
            raise GaugeError("graph has no prior edge; the gauge is unconstrained")
        self.ids = graph.ids()
        self.index = {nid: k for k, nid in enumerate(self.ids)}
        self.params = params
        self.backend = backend
        self.n_edges = len(graph.edges)
        buckets = {"prior": ([], []), "absolute": ([], []), "scale_free": ([], [])}
        for k, e in enumerate(graph.edges):
            if isinstance(e, PriorEdge):
                key = "prior"
            elif isinstance(e, ScaleFreeLoopEdge):
                key = "scale_free"
            elif isinstance(e, (OdometryEdge, AbsoluteLoopEdge)):
                key = "absolute"
            else:
                raise ParameterError(f"unsupported edge type {type(e).__name__}")
            buckets[key][0].append(e)
            buckets[key][1].append(k)
        self.groups = [_Group(kind, es, ids, self.index)
                       for kind, (es, ids) in buckets.items() if es]

    def state(self, graph):
        R = np.array([graph.nodes[i].estimate.R for i in self.ids])
        t = np.array([graph.nodes[i].estimate.t for i in self.ids])
        return R, t

    def _weights(self, s, robust):
        w = np.ones_like(s)
        cost = 0.5 * s
        if self.params.robust and np.any(robust):
            c2 = self.params.cauchy_scale ** 2
            sr = s[robust]
            cost = cost.copy()
            cost[robust] = 0.5 * c2 * np.log1p(sr / c2)
            # 2 * rho'(s), so that a robust edge at zero error weighs like a quadratic one
            w[robust] = 1.0 / (1.0 + sr / c2)
        return cost, w

    def evaluate(self, R, t, with_jacobians=True):
        out = []
        for g in self.groups:
            r, Ja, Jb, norm = g.terms(R, t, self.backend)
            if norm is not None:
                bad = norm < DEGENERATE_TRANSLATION
                if np.any(bad):
                    eid = int(g.edge_ids[np.argmax(bad)])
                    raise DegenerateGeometryError(
                        f"scale-free edge #{eid}: expected translation is degenerate")
            s = np.einsum("ei,eij,ej->e", r, g.info, r)
            cost, w = self._weights(s, g.robust)
            if not np.all(np.isfinite(cost)):
                eid = int(g.edge_ids[np.argmax(~np.isfinite(cost))])
                raise NumericalError(f"non-finite cost at edge #{eid}", edge_id=eid)
            out.append((g, r, Ja, Jb, s, cost, w))
        return out

    def cost(self, R, t) -> float:
        return float(sum(c.sum() for *_, c, _ in self.evaluate(R, t)))

    def linear_system(self, terms):
        n = len(self.ids)
        dim = 6 * n
        rows, cols, vals = [], [], []
        b = np.zeros(dim)
        weights = np.zeros(self.n_edges)
        blk_r = np.repeat(np.arange(6), 6)
        blk_c = np.tile(np.arange(6), 6)
        for g, r, Ja, Jb, s, cost, w in terms:
            weights[g.edge_ids] = w
            Wi = w[:, None, None] * g.info
            WJb = np.matmul(Wi, Jb)
            WJr = np.einsum("eij,ej->ei", Wi, r)
            blocks = [(g.b, g.b, np.matmul(np.swapaxes(Jb, 1, 2), WJb))]
            np.add.at(b, (6 * g.b[:, None] + np.arange(6)),
                      -np.einsum("eji,ej->ei", Jb, WJr))
            if g.kind != "prior":
                WJa = np.matmul(Wi, Ja)
                JaT = np.swapaxes(Ja, 1, 2)
                blocks.append((g.a, g.a, np.matmul(JaT, WJa)))
                ab = np.matmul(JaT, WJb)
                blocks.append((g.a, g.b, ab))
                blocks.append((g.b, g.a, np.swapaxes(ab, 1, 2)))
                np.add.at(b, (6 * g.a[:, None] + np.arange(6)),
                          -np.einsum("eji,ej->ei", Ja, WJr))
            for p, q, blk in blocks:
                rows.append((6 * p[:, None] + blk_r).ravel())
                cols.append((6 * q[:, None] + blk_c).ravel())
                vals.append(blk.reshape(len(p), 36).ravel())
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(dim, dim)).tocsc()
        return H, b, weights


@dataclass
class LinearSystem:
    H: sp.csc_matrix
    b: np.ndarray
    weights: np.ndarray
    cost: float
    ids: list


def linearize(graph: PoseGraph, params: SolverParams | None = None, backend=None) -> LinearSystem:
    """Gauss-Newton normal equations ``H delta = b`` at the current estimates.

    ``weights`` holds the IRLS weight of every edge, in ``graph.edges`` order.
    """
    params = params or SolverParams()
    prob = _Problem(graph, params, backend)
    R, t = prob.state(graph)
    terms = prob.evaluate(R, t)
    H, b, w = prob.linear_system(terms)
    cost = float(sum(c.sum() for *_, c, _ in terms))
    return LinearSystem(H, b, w, cost, prob.ids)


def _solve(H, rhs, n_nodes, dense_threshold):
    if n_nodes <= dense_threshold:
        c = scipy.linalg.cho_factor(H.toarray(), check_finite=False)
        return scipy.linalg.cho_solve(c, rhs, check_finite=False)
    lu = spla.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options={"SymmetricMode": True})
    return lu.solve(rhs)


def optimize(graph: PoseGraph, params: SolverParams | None = None, backend=None):
    """Minimize the graph cost starting from the current node estimates.

    Returns ``(estimates, report)``; the graph itself is not modified.
    """
    params = params or SolverParams()
    prob = _Problem(graph, params, backend)
    R, t = prob.state(graph)
    for k, nid in enumerate(prob.ids):
        if not np.all(np.isfinite(R[k])) or not np.all(np.isfinite(t[k])):
            raise NumericalError(f"node {nid} has a non-finite estimate")
    n = len(prob.ids)
    terms = prob.evaluate(R, t)
    cost = float(sum(c.sum() for *_, c, _ in terms))
    report = SolveReport(cost, cost, 0, False, [cost])
    lam = params.initial_damping
    while report.iterations < params.max_iterations:
        report.iterations += 1
        H, b, _ = prob.linear_system(terms)
        diag = H.diagonal()
        accepted = False
        while True:
            damped = H + sp.diags(lam * diag, format="csc")
            try:
                delta = _solve(damped, b, n, params.dense_threshold)
            except (np.linalg.LinAlgError, RuntimeError) as exc:
                raise NumericalError(f"linear solve failed: {exc}") from exc
            step = float(np.linalg.norm(delta))
            if not math.isfinite(step):
                raise NumericalError("non-finite step")
            if step < params.step_tolerance:
                report.converged = True
                report.reason = "step below tolerance"
                break
            R_new, t_new = kernels.retract(R, t, delta.reshape(n, 6), prob.backend)
            try:
                new_terms = prob.evaluate(R_new, t_new)
                new_cost = float(sum(c.sum() for *_, c, _ in new_terms))
            except (DegenerateGeometryError, NumericalError):
                # a trial state the cost cannot be evaluated at counts as a rejected step
                new_cost = math.inf
            if new_cost < cost:
                accepted = True
                break
            lam *= 10.0
            if lam > 1e12:
                report.converged = True
                report.reason = "no decreasing step"
                break
        if not accepted:
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        R, t, terms, cost = R_new, t_new, new_terms, new_cost
        report.cost_trace.append(cost)
        lam = max(lam * 0.5, 1e-12)
        if rel < params.cost_tolerance or cost < 1e-30:
            report.converged = True
            report.reason = "cost change below tolerance"
            break
    else:
        report.reason = "max iterations"
    report.final_cost = cost
    log.debug("optimize: %d nodes, %d edges, cost %.3e -> %.3e in %d iterations",
              n, prob.n_edges, report.initial_cost, cost, report.iterations)
    estimates = {nid: Pose(R[k], t[k]) for k, nid in enumerate(prob.ids)}
    return estimates, report
