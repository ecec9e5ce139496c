"""Loop-closure pipeline: keyframing, retrieval, two-view edges, filters, PGO.

Frames are pushed one at a time through :meth:`LoopClosurePipeline.process_frame`.
Every decision is recorded as a :class:`PipelineEvent`, so the trace alone
shows why each loop edge exists and why every rejected candidate was dropped.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    AmbiguousDecompositionError, DegenerateGeometryError, InputError, InsufficientDataError,
    NoConsensusError, ParameterError,
)
from .graph import (
    DEGENERATE_TRANSLATION, AbsoluteLoopEdge, GraphNode, OdometryEdge, PoseGraph, PriorEdge,
    ScaleFreeLoopEdge, information_from_sigmas, make_information, normalize_translation,
)
from .optimizer import SolverParams, optimize, should_optimize
from .retrieval import (
    DescriptorIndex, RetrievalParams, merge_candidates, proximity_candidates,
    similarity_candidates,
)
from .se3 import Pose, pose_metrics, relative_pose, rotation_angle
from .twoview import (
    CameraIntrinsics, RansacParams, count_rotation_inliers, decompose_essential,
    estimate_essential, lift_keypoints_depth, lift_keypoints_pointmap, normalize_pixels, solve_pnp,
)

log = logging.getLogger(__name__)

VARIANTS = ("scale-free", "absolute", "both")
LIFTING = ("depth", "pointmap")


@dataclass
class KeyframePolicy:
    kf_trans_threshold: float = 1.0
    kf_rot_threshold: float = 0.25

    def __post_init__(self):
        if not (self.kf_trans_threshold > 0 and self.kf_rot_threshold > 0):
            raise ParameterError("keyframe thresholds must be positive")


@dataclass
class FilterParams:
    min_matches: int = 30
    min_inliers: int = 20
    min_inlier_ratio: float = 0.4
    consistency_gate_trans: float = 5.0
    consistency_gate_rot: float = 0.35
    pure_rotation_ratio: float = 0.8
    pure_rotation_threshold: float = 8e-3   # rad, rotation-only inlier test
    enabled: bool = True

    def __post_init__(self):
        if self.min_matches < 0 or self.min_inliers < 0:
            raise ParameterError("match and inlier minimums must be >= 0")
        for name in ("min_inlier_ratio", "pure_rotation_ratio"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ParameterError(f"{name} must lie in (0, 1]")
        if not (self.consistency_gate_trans > 0 and self.consistency_gate_rot > 0
                and self.pure_rotation_threshold > 0):
            raise ParameterError("gates and thresholds must be positive")


@dataclass
class EdgeNoise:
    """Standard deviations behind the fixed diagonal information matrices."""
    odometry_rot: float = 0.002
    odometry_trans: float = 0.01
    absolute_rot: float = 0.01
    absolute_trans: float = 0.05
    scale_free_rot: float = 0.02
    scale_free_dir: float = 0.05
    prior: float = 1e-4

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise ParameterError(f"edge noise {k} must be positive")

    def odometry(self):
        return information_from_sigmas(self.odometry_rot, self.odometry_trans)

    def absolute(self):
        return information_from_sigmas(self.absolute_rot, self.absolute_trans)

    def scale_free(self):
        return information_from_sigmas(self.scale_free_rot, self.scale_free_dir)

    def prior_info(self):
        return make_information(np.full(6, self.prior ** -2))


@dataclass
class PipelineConfig:
    variant: str = "both"
    lifting: str = "depth"
    max_depth: float = 30.0
    retrieval_enabled: bool = True
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    filters: FilterParams = field(default_factory=FilterParams)
    essential: RansacParams = field(default_factory=lambda: RansacParams(
        max_iterations=500, inlier_threshold=8e-3))
    pnp: RansacParams = field(default_factory=lambda: RansacParams(
        max_iterations=500, inlier_threshold=2.0))
    solver: SolverParams = field(default_factory=lambda: SolverParams(cauchy_scale=3.0))
    noise: EdgeNoise = field(default_factory=EdgeNoise)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lifting not in LIFTING:
            raise ParameterError(f"lifting must be one of {LIFTING}, got {self.lifting!r}")
        if not self.max_depth > 0:
            raise ParameterError("max_depth must be positive")


@dataclass
class FrameInput:
    timestamp: float
    odometry_pose: Pose
    intrinsics: CameraIntrinsics
    observation: object   # exposes descriptor, keypoints, depth, pointmap


@dataclass(frozen=True)
class PipelineEvent:
    kind: str
    node: int
    data: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"event": self.kind, "node": self.node, **self.data}, sort_keys=True)


KEYFRAME = "KeyframeAccepted"
CANDIDATE = "CandidateProposed"
REJECTED = "CandidateRejected"
EDGE = "EdgeAdded"
OPTIMIZED = "Optimized"


# rules -------------------------------------------------------------------------------

def select_keyframe(current: Pose, last_kf: Pose | None, policy: KeyframePolicy) -> bool:
    if last_kf is None:
        return True
    rot, trans = pose_metrics(relative_pose(last_kf, current))
    return trans >= policy.kf_trans_threshold or rot >= policy.kf_rot_threshold


def filter_matching_feasibility(match_count: int, params: FilterParams) -> bool:
    return match_count >= params.min_matches


def filter_geometric_feasibility(solver_inliers: int, sample_size: int,
                                 params: FilterParams) -> bool:
    if sample_size <= 0:
        return False
    return (solver_inliers >= params.min_inliers
            and solver_inliers / sample_size >= params.min_inlier_ratio)


def _angle(u, v) -> float:
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def filter_graph_consistency(edge, estimates: dict, params: FilterParams) -> bool:
    """Whether a loop edge agrees with the current trajectory estimate."""
    expected = relative_pose(estimates[edge.source], estimates[edge.target])
    if isinstance(edge, ScaleFreeLoopEdge):
        if np.linalg.norm(expected.t) < DEGENERATE_TRANSLATION:
            return False
        ang = _angle(edge.direction, normalize_translation(expected.t))
        rot = rotation_angle(edge.rotation.T @ expected.R)
        return ang <= params.consistency_gate_rot and rot <= params.consistency_gate_rot
    rot, trans = pose_metrics(edge.measurement.inverse() @ expected)
    return trans <= params.consistency_gate_trans and rot <= params.consistency_gate_rot


def detect_pure_rotation(e_inliers: int, rotation_only_inliers: int, ratio: float) -> bool:
    """True when a zero-baseline model explains the essential inliers.

    Zero inliers count as pure rotation, which drops the scale-free edge.
    """
    if e_inliers <= 0:
        return True
    return rotation_only_inliers >= ratio * e_inliers


# edge construction -------------------------------------------------------------------

def build_edges(a: int, k: int, pixels_a, pixels_k, observation_k, camera: CameraIntrinsics,
                config: PipelineConfig, estimates: dict):
    """Loop edges ``a -> k`` from one candidate pair, plus the events explaining them.

    Only the edge kinds selected by ``config.variant`` are attempted.
    """
    f = config.filters
    events: list[PipelineEvent] = []
    edges = []
    pa = np.asarray(pixels_a, dtype=float).reshape(-1, 2)
    pk = np.asarray(pixels_k, dtype=float).reshape(-1, 2)
    n = len(pa)

    def reject(stage, kind=None, **info):
        events.append(PipelineEvent(REJECTED, k, {"candidate": a, "stage": stage,
                                                  "edge_kind": kind, **info}))

    if f.enabled and not filter_matching_feasibility(n, f):
        reject("matching", matches=n)
        return edges, events

    def admit(edge, kind, inliers, sample):
        if f.enabled and not filter_graph_consistency(edge, estimates, f):
            reject("consistency", kind)
            return
        edges.append(edge)
        events.append(PipelineEvent(EDGE, k, {
            "candidate": a, "edge_kind": kind, "inliers": int(inliers), "sample": int(sample),
            "filters": ["matching", "geometric", "consistency"] if f.enabled else []}))

    K = camera.K
    if config.variant in ("scale-free", "both"):
        try:
            E, mask = estimate_essential(pa, pk, K, K, config.essential)
        except (InsufficientDataError, NoConsensusError) as exc:
            reject("geometric", "scale-free", reason=type(exc).__name__)
        else:
            m = int(mask.sum())
            if f.enabled and not filter_geometric_feasibility(m, n, f):
                reject("geometric", "scale-free", inliers=m, sample=n)
            else:
                # checked before decomposition: with no baseline the four E factorizations
                # are indistinguishable and the direction is undefined
                rot_in = count_rotation_inliers(normalize_pixels(pa[mask], K),
                                                normalize_pixels(pk[mask], K),
                                                f.pure_rotation_threshold)
                if detect_pure_rotation(m, rot_in, f.pure_rotation_ratio):
                    reject("pure_rotation", "scale-free", inliers=m, rotation_inliers=rot_in)
                else:
                    try:
                        R, d = decompose_essential(E, pa[mask], pk[mask], K, K)
                    except (AmbiguousDecompositionError, InsufficientDataError,
                            DegenerateGeometryError) as exc:
                        reject("decomposition", "scale-free", reason=type(exc).__name__)
                    else:
                        admit(ScaleFreeLoopEdge(a, k, R, d, config.noise.scale_free()),
                              "scale-free", m, n)

    if config.variant in ("absolute", "both"):
        if config.lifting == "depth":
            pts, kept = lift_keypoints_depth(pk, observation_k.depth, camera, config.max_depth)
        else:
            pts, kept = lift_keypoints_pointmap(pk, observation_k.pointmap, config.max_depth)
        try:
            T, mask = solve_pnp(pts, pa[kept], K, config.pnp)
        except (InsufficientDataError, NoConsensusError) as exc:
            reject("geometric", "absolute", reason=type(exc).__name__)
        else:
            m = int(mask.sum())
            if f.enabled and not filter_geometric_feasibility(m, len(kept), f):
                reject("geometric", "absolute", inliers=m, sample=len(kept))
            else:
                admit(AbsoluteLoopEdge(a, k, T, config.noise.absolute()), "absolute", m, len(kept))
    return edges, events


# pipeline ------------------------------------------------------------------------------

Matcher = Callable[..., tuple]


class LoopClosurePipeline:
    """Incremental state: pose graph, descriptor index, keyframe bookkeeping.

    ``matcher(obs_a, obs_k, key)`` returns corresponding pixels
    ``(pixels_a, pixels_k)``.  An optional ``injector`` may add extra
    candidates and supply their matches (used for robustness experiments).
    """

    def __init__(self, config: PipelineConfig | None = None, matcher: Matcher | None = None,
                 injector=None):
        self.config = config or PipelineConfig()
        if matcher is None:
            raise ParameterError("a matcher is required")
        self.matcher = matcher
        self.injector = injector
        self.graph = PoseGraph()
        self.index = DescriptorIndex()
        self.events: list[PipelineEvent] = []
        self.frame_of: dict[int, int] = {}       # node id -> frame index
        self.odometry: dict[int, Pose] = {}      # node id -> raw odometry pose
        self._observations: dict[int, object] = {}
        self._frames = 0
        self._last_time = None
        self._since_opt = 0
        self._new_loops = 0
        self._optimized = False

    # -- helpers
    def _emit(self, evs):
        for e in evs:
            log.debug(e.to_json())
        self.events.extend(evs)

    def _solve(self, node):
        est, rep = optimize(self.graph, self.config.solver)
        self.graph.set_estimates(est)
        self._optimized = True
        self._new_loops = 0
        self._emit([PipelineEvent(OPTIMIZED, node, {
            "initial_cost": rep.initial_cost, "final_cost": rep.final_cost,
            "iterations": rep.iterations, "converged": rep.converged, "reason": rep.reason,
            "nodes": len(self.graph.ids()), "loop_edges": len(self.graph.loop_edges())})])

    # -- main entry
    def process_frame(self, frame: FrameInput) -> list[PipelineEvent]:
        ts = float(frame.timestamp)
        if self._last_time is not None and not ts > self._last_time:
            raise InputError(f"timestamps must increase: {ts!r} after {self._last_time!r}")
        self._last_time = ts
        frame_index = self._frames
        self._frames += 1
        start = len(self.events)
        cfg = self.config

        ids = self.graph.ids()
        last = ids[-1] if ids else None
        last_odo = self.odometry[last] if last is not None else None
        if not select_keyframe(frame.odometry_pose, last_odo, cfg.keyframe):
            return []

        k = 0 if last is None else last + 1
        odo = frame.odometry_pose
        if last is None:
            init = odo
        elif not self._optimized:
            init = odo                     # raw odometry until the first correction
        else:
            init = self.graph.nodes[last].estimate @ relative_pose(last_odo, odo)
        self.graph.add_node(GraphNode(k, init, ts))
        if last is None:
            self.graph.add_edge(PriorEdge(k, odo, cfg.noise.prior_info()))
        else:
            self.graph.add_edge(OdometryEdge(last, k, relative_pose(last_odo, odo),
                                             cfg.noise.odometry()))
        self.odometry[k] = odo
        self.frame_of[k] = frame_index
        self._observations[k] = frame.observation
        self._emit([PipelineEvent(KEYFRAME, k, {"frame": frame_index, "timestamp": ts})])

        obs = frame.observation
        if cfg.retrieval_enabled:
            estimates = self.graph.estimates()
            times = {n: self.graph.nodes[n].timestamp for n in estimates}
            sim = similarity_candidates(obs.descriptor, ts, self.index, cfg.retrieval, query_id=k)
            prox = proximity_candidates(k, estimates, times, cfg.retrieval)
            cands = merge_candidates(sim, prox)
            injected = []
            if self.injector is not None:
                injected = self.injector.extra_candidates(
                    frame_index, {n: self.frame_of[n] for n in self.frame_of if n < k}, cands)
            for a in cands + injected:
                src = "injected" if a in injected else ("similarity" if a in sim else "proximity")
                self._emit([PipelineEvent(CANDIDATE, k, {"candidate": a, "source": src})])
                if a in injected:
                    pa, pk = self.injector.matches(a, frame_index, obs)
                else:
                    pa, pk = self.matcher(self._observations[a], obs, (a, k))
                edges, evs = build_edges(a, k, pa, pk, obs, frame.intrinsics, cfg, estimates)
                for e in edges:
                    self.graph.add_edge(e)
                self._new_loops += len(edges)
                self._emit(evs)
            self.index.add(k, obs.descriptor, ts)

        self._since_opt += 1
        if should_optimize(len(self.graph.ids()), self._since_opt, cfg.solver.cadence_l):
            self._since_opt = 0
            # with no new loop edges the graph is already at its optimum
            if self._new_loops:
                self._solve(k)
        return self.events[start:]

    def finalize(self) -> list[PipelineEvent]:
        """Final optimization if loop edges arrived since the last one."""
        start = len(self.events)
        if self._new_loops and self.graph.ids():
            self._solve(self.graph.ids()[-1])
        return self.events[start:]

    def trajectory(self):
        """``(timestamps, estimated poses, odometry poses)`` of the keyframes."""
        ids = self.graph.ids()
        times = np.array([self.graph.nodes[n].timestamp for n in ids])
        return times, [self.graph.nodes[n].estimate for n in ids], [self.odometry[n] for n in ids]


@dataclass
class PipelineResult:
    timestamps: np.ndarray
    estimates: list
    odometry: list
    events: list
    graph: PoseGraph
    frames: list          # frame index of each keyframe


def run_pipeline(frames, config: PipelineConfig | None = None, matcher: Matcher | None = None,
                 injector=None) -> PipelineResult:
    pipe = LoopClosurePipeline(config, matcher, injector)
    for fr in frames:
        pipe.process_frame(fr)
    pipe.finalize()
    times, est, odo = pipe.trajectory()
    return PipelineResult(times, est, odo, pipe.events, pipe.graph,
                          [pipe.frame_of[n] for n in pipe.graph.ids()])


def synthetic_frames(world):
    """FrameInputs for a :class:`~twoview_pgo.synth.SyntheticWorld`."""
    cam = world.scenario.camera
    return (FrameInput(float(world.times[i]), world.odometry[i], cam, world.observation(i))
            for i in range(len(world)))


def run_scenario_frames(frames, scenario, groundtruth, config: PipelineConfig | None = None,
                        adversarial_rate: float = 0.0, seed: int = 0) -> PipelineResult:
    """Run on synthetic frames with the landmark-id matcher of ``scenario``.

    ``groundtruth`` is only used to place adversarial candidates.
    """
    from .synth import AliasingInjector, SyntheticMatcher

    matcher = SyntheticMatcher(scenario.noise.outlier_rate, seed=[scenario.seed, seed])
    injector = None
    if adversarial_rate > 0:
        injector = AliasingInjector(groundtruth, scenario.camera, adversarial_rate,
                                    pixel_sigma=scenario.noise.pixel_sigma,
                                    seed=[scenario.seed, seed])
    return run_pipeline(frames, config, matcher, injector)


def run_synthetic(world, config: PipelineConfig | None = None, adversarial_rate: float = 0.0,
                  seed: int = 0) -> PipelineResult:
    """Run the pipeline on an in-memory synthetic world."""
    return run_scenario_frames(synthetic_frames(world), world.scenario, world.gt, config,
                               adversarial_rate, seed)
