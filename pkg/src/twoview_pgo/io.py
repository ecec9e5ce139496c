"""File formats: TUM and KITTI trajectories, graph text, flat config,
NDJSON event traces and synthetic dataset directories.

Floats are written with ``repr`` so every value survives a round trip.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .graph import (
    AbsoluteLoopEdge, GraphNode, OdometryEdge, PoseGraph, PriorEdge, ScaleFreeLoopEdge,
)
from .pipeline import FrameInput, PipelineConfig
from .se3 import Pose
from .synth import Scenario, SyntheticObservation

_TRIU = np.triu_indices(6)


def _f(x) -> str:
    return repr(float(x))


def _floats(tokens, path, lineno):
    try:
        return [float(x) for x in tokens]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from None


def _data_lines(text):
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield lineno, s.split()


# trajectories ------------------------------------------------------------------------

def write_tum(path, timestamps, poses) -> None:
    lines = []
    for ts, p in zip(timestamps, poses):
        lines.append(" ".join(_f(v) for v in [ts, *p.t, *p.quat()]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path):
    """``(timestamps, poses)`` from a TUM file (``# comments`` allowed)."""
    times, poses = [], []
    for lineno, tok in _data_lines(Path(path).read_text()):
        if len(tok) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(tok)}")
        v = _floats(tok, path, lineno)
        q = np.array(v[4:])
        if not abs(np.linalg.norm(q) - 1.0) < 1e-6:
            raise FormatError(f"{path}:{lineno}: quaternion is not unit norm")
        times.append(v[0])
        poses.append(Pose.from_quat(v[1:4], q))
    return np.array(times), poses


def write_kitti(path, poses) -> None:
    lines = [" ".join(_f(v) for v in p.matrix()[:3].ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_kitti(path) -> list[Pose]:
    poses = []
    for lineno, tok in _data_lines(Path(path).read_text()):
        if len(tok) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 fields, got {len(tok)}")
        m = np.array(_floats(tok, path, lineno)).reshape(3, 4)
        poses.append(Pose(m[:, :3], m[:, 3]))
    return poses


# graph text --------------------------------------------------------------------------
# VERTEX_SE3:QUAT id tx ty tz qx qy qz qw
# VERTEX_STAMP id timestamp
# EDGE_SE3:QUAT i j tx ty tz qx qy qz qw <21 info>   (i == j marks the prior on i;
#     a trailing LOOP marks an absolute loop edge, NONROBUST clears its robust flag)
# EDGE_SE3_DIR i j dx dy dz qx qy qz qw <21 info> [NONROBUST]

def _info_tokens(info):
    return [_f(v) for v in np.asarray(info)[_TRIU]]


def _info_from(values):
    m = np.zeros((6, 6))
    m[_TRIU] = values
    return m + np.triu(m, 1).T


def _quat(R):
    return Pose(R, np.zeros(3)).quat()


def format_graph(graph: PoseGraph) -> str:
    out = []
    for nid in graph.ids():
        node = graph.nodes[nid]
        p = node.estimate
        out.append(" ".join(["VERTEX_SE3:QUAT", str(nid), *map(_f, p.t), *map(_f, p.quat())]))
        out.append(f"VERTEX_STAMP {nid} {_f(node.timestamp)}")
    for e in graph.edges:
        if isinstance(e, PriorEdge):
            head = ["EDGE_SE3:QUAT", str(e.node), str(e.node), *map(_f, e.anchor.t),
                    *map(_f, e.anchor.quat())]
            tail = []
        elif isinstance(e, ScaleFreeLoopEdge):
            head = ["EDGE_SE3_DIR", str(e.source), str(e.target), *map(_f, e.direction),
                    *map(_f, _quat(e.rotation))]
            tail = [] if e.robust else ["NONROBUST"]
        else:
            m = e.measurement
            head = ["EDGE_SE3:QUAT", str(e.source), str(e.target), *map(_f, m.t),
                    *map(_f, m.quat())]
            tail = [] if isinstance(e, OdometryEdge) else \
                (["LOOP"] if e.robust else ["LOOP", "NONROBUST"])
        out.append(" ".join(head + _info_tokens(e.info) + tail))
    return "\n".join(out) + "\n"


def parse_graph(text: str, source="<graph>") -> PoseGraph:
    vertices, stamps, edges = {}, {}, []
    for lineno, tok in _data_lines(text):
        tag = tok[0]
        if tag == "VERTEX_SE3:QUAT":
            if len(tok) != 9:
                raise FormatError(f"{source}:{lineno}: VERTEX_SE3:QUAT needs 8 values")
            v = _floats(tok[2:], source, lineno)
            vertices[int(tok[1])] = Pose.from_quat(v[:3], v[3:])
        elif tag == "VERTEX_STAMP":
            if len(tok) != 3:
                raise FormatError(f"{source}:{lineno}: VERTEX_STAMP needs 2 values")
            stamps[int(tok[1])] = _floats(tok[2:], source, lineno)[0]
        elif tag in ("EDGE_SE3:QUAT", "EDGE_SE3_DIR"):
            if len(tok) < 31:
                raise FormatError(f"{source}:{lineno}: {tag} needs 30 values")
            flags = tok[31:]
            if any(f not in ("LOOP", "NONROBUST") for f in flags):
                raise FormatError(f"{source}:{lineno}: unknown edge flags {flags}")
            i, j = int(tok[1]), int(tok[2])
            v = _floats(tok[3:31], source, lineno)
            info = _info_from(v[7:])
            robust = "NONROBUST" not in flags
            if tag == "EDGE_SE3_DIR":
                R = Pose.from_quat(np.zeros(3), v[3:7]).R
                edges.append(ScaleFreeLoopEdge(i, j, R, np.array(v[:3]), info, robust))
                continue
            p = Pose.from_quat(v[:3], v[3:7])
            if i == j:
                edges.append(PriorEdge(i, p, info))
            elif "LOOP" in flags:
                edges.append(AbsoluteLoopEdge(i, j, p, info, robust))
            else:
                edges.append(OdometryEdge(i, j, p, info))
        else:
            raise FormatError(f"{source}:{lineno}: unknown record {tag!r}")
    g = PoseGraph()
    for nid in sorted(vertices):
        g.add_node(GraphNode(nid, vertices[nid], stamps.get(nid, float(nid))))
    for e in edges:
        g.add_edge(e)
    return g


def write_graph(path, graph: PoseGraph) -> None:
    Path(path).write_text(format_graph(graph))


def read_graph(path) -> PoseGraph:
    return parse_graph(Path(path).read_text(), str(path))


# flat config -------------------------------------------------------------------------
# "section.key = value" lines; top-level keys have no section.

PIPELINE_SECTIONS = ("keyframe", "retrieval", "filters", "essential", "pnp", "solver", "noise")
EXTRA_KEYS = {"seed": 0, "adversarial_rate": 0.0}


def parse_flat(text: str, source="<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (x.strip() for x in s.split("=", 1))
        if not k or k in out:
            raise ConfigError(f"{source}:{lineno}: empty or duplicate key {k!r}")
        out[k] = v
    return out


def _coerce(value: str, like, key):
    try:
        if isinstance(like, bool):
            low = value.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _apply(obj, items: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(obj) if not f.name.startswith("_")}
    updates = {}
    for k, v in items.items():
        if k not in names or dataclasses.is_dataclass(getattr(obj, k)):
            raise ConfigError(f"unknown config key {prefix}{k!r}")
        updates[k] = _coerce(v, getattr(obj, k), prefix + k)
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def config_from_flat(flat: dict):
    """``(PipelineConfig, Scenario, extras)`` from a flat key-value mapping."""
    groups: dict[str, dict] = {}
    for key, v in flat.items():
        sec, _, name = key.rpartition(".")
        groups.setdefault(sec, {})[name] = v
    top = groups.pop("", {})
    extras = {k: _coerce(top.pop(k), d, k) for k, d in EXTRA_KEYS.items() if k in top}

    cfg = PipelineConfig()
    nested = {s: _apply(getattr(cfg, s), groups.pop(s, {}), s + ".") for s in PIPELINE_SECTIONS}
    cfg = _apply(cfg, top, "")
    cfg = dataclasses.replace(cfg, **nested)

    sc = Scenario()
    camera = _apply(sc.camera, groups.pop("camera", {}), "camera.")
    noise = _apply(sc.noise, groups.pop("synth_noise", {}), "synth_noise.")
    sc = _apply(sc, groups.pop("scenario", {}), "scenario.")
    sc = dataclasses.replace(sc, camera=camera, noise=noise)
    if groups:
        raise ConfigError(f"unknown config sections {sorted(groups)}")
    return cfg, sc, {**EXTRA_KEYS, **extras}


def load_config(path):
    return config_from_flat(parse_flat(Path(path).read_text(), str(path)))


def _flatten(obj, prefix):
    out = []
    for f in dataclasses.fields(obj):
        if f.name.startswith("_"):
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            continue
        out.append(f"{prefix}{f.name} = {_f(v) if isinstance(v, float) else v}")
    return out


def format_config(cfg: PipelineConfig | None = None, scenario: Scenario | None = None,
                  extras: dict | None = None) -> str:
    lines = []
    if extras:
        lines += [f"{k} = {v!r}" for k, v in extras.items()]
    if cfg is not None:
        lines += _flatten(cfg, "")
        for s in PIPELINE_SECTIONS:
            lines += _flatten(getattr(cfg, s), s + ".")
    if scenario is not None:
        lines += _flatten(scenario, "scenario.")
        lines += _flatten(scenario.camera, "camera.")
        lines += _flatten(scenario.noise, "synth_noise.")
    return "\n".join(lines) + "\n"


# events ------------------------------------------------------------------------------

def write_events(path, events) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in events))


def read_events(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


# synthetic dataset directories --------------------------------------------------------

def save_dataset(directory, world) -> Path:
    """Write a :class:`~twoview_pgo.synth.SyntheticWorld` as files.

    ``scenario.cfg``, ``groundtruth.tum``, ``odometry.tum`` and
    ``observations.npz`` with the per-frame keypoints, landmark ids,
    keypoint depths and points, and descriptors.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "scenario.cfg").write_text(format_config(scenario=world.scenario))
    write_tum(d / "groundtruth.tum", world.times, world.gt)
    write_tum(d / "odometry.tum", world.times, world.odometry)
    obs = [world.observation(i) for i in range(len(world))]
    np.savez_compressed(
        d / "observations.npz",
        counts=np.array([len(o.keypoints) for o in obs]),
        keypoints=np.concatenate([o.keypoints for o in obs]),
        landmark_ids=np.concatenate([o.landmark_ids for o in obs]),
        depths=np.concatenate([o.keypoint_depths for o in obs]),
        points=np.concatenate([o.keypoint_points for o in obs]),
        descriptors=np.array([o.descriptor for o in obs]),
    )
    return d


@dataclasses.dataclass
class Dataset:
    scenario: Scenario
    timestamps: np.ndarray
    groundtruth: list
    odometry: list
    observations: list

    def frames(self):
        cam = self.scenario.camera
        return [FrameInput(float(t), p, cam, o)
                for t, p, o in zip(self.timestamps, self.odometry, self.observations)]


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in ("scenario.cfg", "groundtruth.tum", "odometry.tum", "observations.npz"):
        if not (d / name).is_file():
            raise FormatError(f"dataset {d} is missing {name}")
    _, sc, _ = load_config(d / "scenario.cfg")
    t_gt, gt = read_tum(d / "groundtruth.tum")
    t_odo, odo = read_tum(d / "odometry.tum")
    if len(gt) != len(odo) or not np.array_equal(t_gt, t_odo):
        raise FormatError(f"dataset {d}: ground truth and odometry stamps differ")
    with np.load(d / "observations.npz") as z:
        counts = z["counts"]
        if len(counts) != len(odo):
            raise FormatError(f"dataset {d}: {len(counts)} observations for {len(odo)} frames")
        splits = np.cumsum(counts)[:-1]
        parts = {k: np.split(z[k], splits) for k in ("keypoints", "landmark_ids", "depths",
                                                     "points")}
        desc = z["descriptors"]
    cam = sc.camera
    obs = [SyntheticObservation(parts["keypoints"][i], parts["landmark_ids"][i],
                                parts["depths"][i], parts["points"][i], desc[i],
                                cam.width, cam.height) for i in range(len(odo))]
    return Dataset(sc, t_odo, gt, odo, obs)


__all__ = [
    "Dataset", "config_from_flat", "format_config", "format_graph", "load_config",
    "load_dataset", "parse_flat", "parse_graph", "read_events", "read_graph", "read_kitti",
    "read_tum", "save_dataset", "write_events", "write_graph", "write_kitti", "write_tum"
]
