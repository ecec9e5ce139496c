"""Loop-closure candidate generation.

Two sources are merged: the most similar global descriptors among earlier
keyframes, and earlier keyframes whose current pose estimate lies within
rotation and translation gates of the query keyframe.  Both sources skip
keyframes closer in time than ``min_time_gap``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .se3 import pose_metrics, relative_pose


@dataclass
class RetrievalParams:
    n_sim: int = 3
    n_prox: int = 3
    delta_r: float = 0.5
    delta_t: float = 3.0
    min_time_gap: float = 10.0
    min_similarity: float = 0.0

    def __post_init__(self):
        if self.n_sim < 0 or self.n_prox < 0:
            raise ParameterError("n_sim and n_prox must be >= 0")
        if not (self.delta_r > 0 and self.delta_t > 0):
            raise ParameterError("proximity gates must be positive")
        if self.min_time_gap < 0:
            raise ParameterError("min_time_gap must be >= 0")


class DescriptorIndex:
    """Append-only store of unit-normalized descriptors keyed by node id."""

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self._ids: list[int] = []
        self._times: list[float] = []
        self._rows: list[np.ndarray] = []
        self._matrix = None

    def __len__(self):
        return len(self._ids)

    def add(self, node_id: int, descriptor, timestamp: float) -> None:
        d = np.asarray(descriptor, dtype=float).ravel()
        if self.dim is None:
            self.dim = d.size
        if d.size != self.dim:
            raise ParameterError(f"descriptor has dimension {d.size}, index uses {self.dim}")
        if self._ids and node_id <= self._ids[-1]:
            raise ParameterError(f"descriptor ids must increase: {node_id} after {self._ids[-1]}")
        n = np.linalg.norm(d)
        if not n > 0:
            raise ParameterError("descriptor must be non-zero")
        self._ids.append(int(node_id))
        self._times.append(float(timestamp))
        self._rows.append(d / n)
        self._matrix = None

    @property
    def ids(self) -> np.ndarray:
        return np.asarray(self._ids, dtype=int)

    @property
    def timestamps(self) -> np.ndarray:
        return np.asarray(self._times, dtype=float)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.array(self._rows) if self._rows else np.zeros((0, self.dim or 0))
        return self._matrix


def similarity_candidates(query, query_time: float, index: DescriptorIndex,
                          params: RetrievalParams, query_id: int | None = None) -> list[int]:
    """Top ``n_sim`` stored ids by descriptor dot product.

    Ties are broken by larger time gap, then lower id.  Entries at or after
    ``query_id`` (when given) are ignored.
    """
    if params.n_sim == 0 or len(index) == 0:
        return []
    q = np.asarray(query, dtype=float).ravel()
    q = q / np.linalg.norm(q)
    ids = index.ids
    gap = query_time - index.timestamps
    score = index.matrix @ q
    keep = (gap >= params.min_time_gap) & (score >= params.min_similarity)
    if query_id is not None:
        keep &= ids < query_id
    sel = np.nonzero(keep)[0]
    order = np.lexsort((ids[sel], -gap[sel], -score[sel]))
    return [int(i) for i in ids[sel][order[:params.n_sim]]]


def proximity_candidates(current: int, estimates: dict, timestamps: dict,
                         params: RetrievalParams) -> list[int]:
    """Earlier keyframes within ``(delta_r, delta_t)`` of ``current``.

    Uses whatever estimates are passed in, which should be the latest
    optimized ones.  Ranked by decreasing time gap, then lower id.
    """
    if params.n_prox == 0:
        return []
    cur = estimates[current]
    t_cur = timestamps[current]
    found = []
    for nid, pose in estimates.items():
        if nid >= current:
            continue
        gap = t_cur - timestamps[nid]
        if gap < params.min_time_gap:
            continue
        rot, trans = pose_metrics(relative_pose(cur, pose))
        if rot < params.delta_r and trans < params.delta_t:
            found.append((-gap, nid))
    found.sort()
    return [nid for _, nid in found[:params.n_prox]]


def merge_candidates(sim: list[int], prox: list[int]) -> list[int]:
    """Union preserving order: similarity hits first, then proximity hits."""
    return list(dict.fromkeys([*sim, *prox]))
