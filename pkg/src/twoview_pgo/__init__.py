"""Trajectory refinement with two-view loop-closure pose-graph optimization.

Odometry is corrected by adding loop edges estimated from a single image
pair: a scale-free edge (rotation plus unit translation from the essential
matrix) and an absolute edge (full pose from PnP on lifted depth), then
solving a robust pose graph.
"""
from .errors import TwoViewPGOError
from .evaluation import align_6dof, lc_edge_errors, percent_decrease, rmse_ate
from .graph import (
    AbsoluteLoopEdge, GraphNode, OdometryEdge, PoseGraph, PriorEdge, ScaleFreeLoopEdge,
    make_information,
)
from .optimizer import SolverParams, optimize
from .pipeline import (
    FilterParams, FrameInput, KeyframePolicy, LoopClosurePipeline, PipelineConfig, run_pipeline,
    run_synthetic,
)
from .se3 import Pose, pose_exp, pose_log, relative_pose
from .synth import NoiseModel, Scenario, SyntheticWorld
from .twoview import CameraIntrinsics, RansacParams

__version__ = "0.1.0"

__all__ = [
    "TwoViewPGOError", "align_6dof", "lc_edge_errors", "percent_decrease", "rmse_ate",
    "AbsoluteLoopEdge", "GraphNode", "OdometryEdge", "PoseGraph", "PriorEdge",
    "ScaleFreeLoopEdge", "make_information", "SolverParams", "optimize", "FilterParams",
    "FrameInput", "KeyframePolicy", "LoopClosurePipeline", "PipelineConfig", "run_pipeline",
    "run_synthetic", "Pose", "pose_exp", "pose_log", "relative_pose", "NoiseModel", "Scenario",
    "SyntheticWorld", "CameraIntrinsics", "RansacParams",
]
