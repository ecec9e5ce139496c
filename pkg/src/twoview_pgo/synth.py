"""Deterministic synthetic front-end.

Generates ground-truth trajectories, a landmark world, drifting odometry,
and per-frame observations (keypoints with landmark ids, depth and point
maps, a place descriptor).  Matching uses the landmark ids, so inlier labels
are known exactly.  Everything is reproducible from the scenario and seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .se3 import Pose, pose_exp, relative_pose, rot_exp, rotation_angle
from .twoview import CameraIntrinsics, DepthMap, PointMap, lift_keypoints_depth

KINDS = ("square", "figure8", "corridor", "random_loop")


def _seed(*parts) -> list[int]:
    """Flatten ints and int sequences into one seed-sequence entropy list."""
    return [int(x) for p in parts for x in np.atleast_1d(p)]


@dataclass
class NoiseModel:
    trans_drift: float = 0.01          # translation noise std, fraction of step length
    rot_drift_per_m: float = 0.0015    # rad of rotation noise per meter travelled
    rot_drift_per_rad: float = 0.01    # rad of rotation noise per radian turned
    pixel_sigma: float = 0.5
    depth_sigma: float = 0.02          # relative
    outlier_rate: float = 0.1
    descriptor_sigma: float = 0.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ParameterError(f"noise parameter {k} must be >= 0")
        if self.outlier_rate >= 1.0:
            raise ParameterError("outlier_rate must be < 1")


@dataclass
class Scenario:
    name: str = "square"
    kind: str = "square"
    side: float = 25.0          # square side / figure-eight and loop radius / corridor length
    step: float = 1.0
    laps: int = 2
    lap_offset: float = 0.5     # lateral offset of every odd lap
    dt: float = 1.0
    landmark_count: int = 4000
    band_inner: float = 2.0     # landmark distance from the path
    band_outer: float = 9.0
    height_min: float = -1.5
    height_max: float = 3.0
    max_range: float = 40.0
    max_keypoints: int = 500
    camera: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(320.0, 320.0, 320.0, 240.0))
    noise: NoiseModel = field(default_factory=NoiseModel)
    descriptor_dim: int = 64
    descriptor_length: float = 6.0      # meters
    descriptor_heading: float = 0.5     # heading chord length scale
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown scenario kind {self.kind!r}; choose from {KINDS}")
        if self.step <= 0 or self.side <= 0 or self.laps < 1 or self.dt <= 0:
            raise ParameterError("side, step, dt must be positive and laps >= 1")
        if self.descriptor_dim < 2 or self.descriptor_dim % 2:
            raise ParameterError("descriptor_dim must be a positive even number")
        if not 0 <= self.band_inner < self.band_outer:
            raise ParameterError("need 0 <= band_inner < band_outer")


def camera_rotation(heading) -> np.ndarray:
    """Camera-to-world rotation looking along a horizontal ``heading``.

    Camera axes: x right, y down, z forward; world z is up.
    """
    h = np.asarray(heading, dtype=float)
    h = h / np.linalg.norm(h)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(h, up)
    right /= np.linalg.norm(right)
    return np.column_stack([right, -up, h])


def _square_lap(side, step, offset):
    n_side = max(1, int(round(side / step)))
    s = side - 2.0 * offset
    corners = np.array([[0, 0], [s, 0], [s, s], [0, s]], dtype=float) + offset
    dirs = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
    pts, heads = [], []
    for k in range(4):
        for j in range(n_side):
            pts.append(corners[k] + dirs[k] * j * s / n_side)
            heads.append(dirs[k])
    return np.array(pts), np.array(heads)


def _curve_lap(fun, length_hint, step, offset):
    """Arc-length sampled closed planar curve ``fun(u)``, u in [0, 1)."""
    u = np.linspace(0.0, 1.0, 4001)
    xy = np.array([fun(x) for x in u])
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(4, int(round(s[-1] / step)))
    targets = np.arange(n) * s[-1] / n
    pu = np.interp(targets, s, u)
    pts = np.array([fun(x) for x in pu])
    tang = np.array([fun(x + 1e-6) - fun(x - 1e-6) for x in pu])
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    if offset:
        normal = np.column_stack([-tang[:, 1], tang[:, 0]])
        pts = pts + offset * normal
    return pts, tang


def generate_trajectory(sc: Scenario):
    """Ground-truth camera-to-world poses and timestamps."""
    rng = np.random.default_rng(sc.seed)
    pts, heads = [], []
    if sc.kind == "corridor":
        n = max(1, int(round(sc.side / sc.step)))
        for lap in range(sc.laps):
            out = np.column_stack([np.arange(n + 1) * sc.step, np.zeros(n + 1)])
            back = out[::-1][1:]
            p = np.vstack([out, back]) if lap == 0 else np.vstack([out[1:], back])
            h = np.vstack([np.tile([1.0, 0.0], (len(p) - len(back), 1)),
                           np.tile([-1.0, 0.0], (len(back), 1))])
            pts.append(p)
            heads.append(h)
    else:
        if sc.kind == "random_loop":
            k = np.arange(2, 5)
            amp = rng.uniform(0.05, 0.15, k.size)
            phase = rng.uniform(0, 2 * np.pi, k.size)

            def fun(u):
                th = 2 * np.pi * u
                r = sc.side * (1.0 + np.sum(amp * np.cos(k * th + phase)))
                return np.array([r * np.cos(th), r * np.sin(th)])
        elif sc.kind == "figure8":
            def fun(u):
                th = 2 * np.pi * u
                return np.array([sc.side * np.sin(th), 0.5 * sc.side * np.sin(2 * th)])
        for lap in range(sc.laps):
            off = sc.lap_offset if lap % 2 else 0.0
            if sc.kind == "square":
                p, h = _square_lap(sc.side, sc.step, off)
            else:
                p, h = _curve_lap(fun, sc.side, sc.step, off)
            pts.append(p)
            heads.append(h)
    pts = np.vstack(pts)
    heads = np.vstack(heads)
    poses = [Pose(camera_rotation(np.append(h, 0.0)), np.append(p, 0.0))
             for p, h in zip(pts, heads)]
    times = np.arange(len(poses)) * sc.dt
    return poses, times


def generate_landmarks(sc: Scenario, poses) -> np.ndarray:
    """Landmarks scattered in a band on both sides of the path."""
    rng = np.random.default_rng([sc.seed, 1])
    centers = np.array([p.t for p in poses])
    heads = np.array([p.R[:, 2] for p in poses])
    idx = rng.integers(0, len(poses), sc.landmark_count)
    along = rng.uniform(-0.5, 0.5, sc.landmark_count) * sc.step
    side = rng.choice([-1.0, 1.0], sc.landmark_count)
    dist = rng.uniform(sc.band_inner, sc.band_outer, sc.landmark_count)
    h = heads[idx]
    lateral = np.column_stack([-h[:, 1], h[:, 0], np.zeros(len(h))])
    pts = centers[idx] + along[:, None] * h + (side * dist)[:, None] * lateral
    pts[:, 2] = rng.uniform(sc.height_min, sc.height_max, sc.landmark_count)
    return pts


def generate_scenario(sc: Scenario):
    """``(gt poses, timestamps, landmarks)``, deterministic in ``sc``."""
    poses, times = generate_trajectory(sc)
    return poses, times, generate_landmarks(sc, poses)


def corrupt_odometry(gt_poses, noise: NoiseModel, seed) -> list[Pose]:
    """Re-chain the relative motions with step-proportional noise."""
    rng = np.random.default_rng([seed, 2])
    out = [gt_poses[0]]
    for a, b in zip(gt_poses, gt_poses[1:]):
        rel = relative_pose(a, b)
        length = float(np.linalg.norm(rel.t))
        turn = rotation_angle(rel.R)
        rs = noise.rot_drift_per_m * length + noise.rot_drift_per_rad * turn
        ts = noise.trans_drift * length
        xi = np.concatenate([rng.normal(size=3) * rs, rng.normal(size=3) * ts])
        out.append(out[-1] @ (rel @ pose_exp(xi)) if rs or ts else out[-1] @ rel)
    return out


class DescriptorEncoder:
    """Random Fourier features of position and viewing direction.

    The dot product of two encodings approximates a Gaussian kernel on the
    scaled distance; frequencies are bounded by one per length scale, so the
    dot product decreases monotonically along any ray out to pi length
    scales.  Encodings have unit norm exactly.
    """

    def __init__(self, dim=64, length=6.0, heading=0.5, seed=0):
        rng = np.random.default_rng([seed, 3])
        m = dim // 2
        d = rng.normal(size=(m, 6))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        self.W = d * rng.uniform(0.0, 1.0, (m, 1))
        self.scale = np.array([1.0 / length] * 3 + [1.0 / heading] * 3)
        self.dim = 2 * m

    def features(self, pose: Pose) -> np.ndarray:
        return np.concatenate([pose.t, pose.R[:, 2]]) * self.scale

    def encode(self, pose: Pose) -> np.ndarray:
        z = self.W @ self.features(pose)
        return np.concatenate([np.cos(z), np.sin(z)]) / math.sqrt(self.W.shape[0])


@dataclass
class SyntheticObservation:
    keypoints: np.ndarray        # (n, 2) pixels
    landmark_ids: np.ndarray     # (n,)
    keypoint_depths: np.ndarray  # (n,) noisy z-depth
    keypoint_points: np.ndarray  # (n, 3) noisy camera-frame points
    descriptor: np.ndarray
    width: int
    height: int

    def _cells(self):
        c = np.clip(np.floor(self.keypoints + 0.5).astype(int), 0,
                    [self.width - 1, self.height - 1])
        order = np.argsort(-self.keypoint_depths, kind="stable")  # nearest written last
        return c[order, 1], c[order, 0], order

    # dense maps are rendered on access rather than stored with the observation
    @property
    def depth(self) -> DepthMap:
        grid = np.full((self.height, self.width), np.nan)
        r, c, o = self._cells()
        grid[r, c] = self.keypoint_depths[o]
        return DepthMap(grid)

    @property
    def pointmap(self) -> PointMap:
        grid = np.full((self.height, self.width, 3), np.nan)
        r, c, o = self._cells()
        grid[r, c] = self.keypoint_points[o]
        return PointMap(grid)


def render_observation(pose: Pose, landmarks, camera: CameraIntrinsics, noise: NoiseModel,
                       seed, encoder: DescriptorEncoder | None = None, max_range=40.0,
                       max_keypoints: int | None = None):
    """Project the visible landmarks and attach depth, point map and descriptor.

    With ``max_keypoints`` only the nearest visible landmarks are kept.
    """
    rng = np.random.default_rng(seed)
    Pc = (np.asarray(landmarks) - pose.t) @ pose.R
    z = Pc[:, 2]
    front = (z > 0.1) & (np.linalg.norm(Pc, axis=1) <= max_range)
    zs = np.where(front, z, 1.0)
    u = camera.fx * Pc[:, 0] / zs + camera.cx
    v = camera.fy * Pc[:, 1] / zs + camera.cy
    vis = front & (u >= 0) & (u <= camera.width - 1) & (v >= 0) & (v <= camera.height - 1)
    ids = np.nonzero(vis)[0]
    if max_keypoints is not None and len(ids) > max_keypoints:
        ids = np.sort(ids[np.argsort(z[ids], kind="stable")[:max_keypoints]])
    px = np.column_stack([u[ids], v[ids]])
    if noise.pixel_sigma:
        px = px + rng.normal(scale=noise.pixel_sigma, size=px.shape)
        px = np.clip(px, 0.0, [camera.width - 1, camera.height - 1])
    # a landmark whose cell is taken by a nearer one is occluded
    cells = np.floor(px + 0.5).astype(int)
    order = np.argsort(z[ids], kind="stable")
    _, first = np.unique(cells[order, 1] * camera.width + cells[order, 0], return_index=True)
    keep = np.sort(order[first])
    ids, px = ids[keep], px[keep]
    factor = 1.0 + noise.depth_sigma * rng.normal(size=len(ids)) if noise.depth_sigma \
        else np.ones(len(ids))
    depths = Pc[ids, 2] * factor
    points = Pc[ids] * factor[:, None]
    if encoder is None:
        encoder = DescriptorEncoder()
    desc = encoder.encode(pose)
    if noise.descriptor_sigma:
        desc = desc + rng.normal(scale=noise.descriptor_sigma, size=desc.shape)
        desc /= np.linalg.norm(desc)
    return SyntheticObservation(px, ids, depths, points, desc, camera.width, camera.height)


@dataclass
class Matches:
    pixels_a: np.ndarray
    pixels_b: np.ndarray
    inlier: np.ndarray           # ground-truth labels
    points_b: np.ndarray         # 3D points lifted from view b's depth map (nan if dropped)


def match_frames(obs_a: SyntheticObservation, obs_b: SyntheticObservation, outlier_rate,
                 seed, camera: CameraIntrinsics | None = None) -> Matches:
    """Correspondences through shared landmark ids, ``floor(rate * n)`` corrupted.

    A corrupted match pairs the view-b keypoint with a keypoint of a different
    landmark in view a.  With ``camera`` given, view-b keypoints are lifted
    through view b's depth map.
    """
    _, ia, ib = np.intersect1d(obs_a.landmark_ids, obs_b.landmark_ids, return_indices=True)
    pa = obs_a.keypoints[ia].copy()
    pb = obs_b.keypoints[ib].copy()
    n = len(ia)
    inlier = np.ones(n, dtype=bool)
    k = int(math.floor(outlier_rate * n + 1e-9))
    if k:
        rng = np.random.default_rng(seed)
        bad = rng.choice(n, k, replace=False)
        m = len(obs_a.keypoints)
        for i in bad:
            if m > 1:
                j = int(rng.integers(0, m - 1))
                j = j + 1 if j >= ia[i] else j
                pa[i] = obs_a.keypoints[j]
            else:
                pa[i] = rng.uniform([0, 0], [obs_a.width - 1, obs_a.height - 1])
        inlier[bad] = False
    pts = np.full((n, 3), np.nan)
    if camera is not None and n:
        lifted, kept = lift_keypoints_depth(pb, obs_b.depth, camera, max_depth=np.inf)
        pts[kept] = lifted
    return Matches(pa, pb, inlier, pts)


class SyntheticWorld:
    """A generated scenario with lazily rendered, cached observations."""

    def __init__(self, sc: Scenario):
        self.scenario = sc
        self.gt, self.times, self.landmarks = generate_scenario(sc)
        self.odometry = corrupt_odometry(self.gt, sc.noise, sc.seed)
        self.encoder = DescriptorEncoder(sc.descriptor_dim, sc.descriptor_length,
                                         sc.descriptor_heading, sc.seed)
        self._cache: dict[int, SyntheticObservation] = {}

    def __len__(self):
        return len(self.gt)

    def observation(self, i: int) -> SyntheticObservation:
        if i not in self._cache:
            sc = self.scenario
            self._cache[i] = render_observation(self.gt[i], self.landmarks, sc.camera, sc.noise,
                                                [sc.seed, 4, i], self.encoder, sc.max_range,
                                                sc.max_keypoints)
        return self._cache[i]


class SyntheticMatcher:
    """Landmark-id matcher with seeded mismatches, keyed by the frame pair."""

    def __init__(self, outlier_rate, seed=0):
        self.outlier_rate = outlier_rate
        self.seed = seed

    def __call__(self, obs_a, obs_b, key=(0, 0)):
        m = match_frames(obs_a, obs_b, self.outlier_rate, _seed(self.seed, 5, key))
        return m.pixels_a, m.pixels_b


class AliasingInjector:
    """Adds false-positive loop candidates with geometrically consistent matches.

    For an injected pair ``(a, k)`` the view-a pixels are synthesized by
    projecting view k's landmarks through a fake, plausible-looking relative
    pose, so the pair passes two-view geometry but contradicts the
    trajectory.  Injection keeps adversarial pairs at about ``rate`` of all
    candidates.
    """

    def __init__(self, gt_poses, camera: CameraIntrinsics, rate=0.1, min_distance=15.0,
                 pixel_sigma=0.5, seed=0):
        if not 0.0 <= rate < 1.0:
            raise ParameterError("adversarial rate must lie in [0, 1)")
        self.gt = gt_poses
        self.camera = camera
        self.rate = rate
        self.min_distance = min_distance
        self.pixel_sigma = pixel_sigma
        self.rng = np.random.default_rng(_seed(seed, 6))
        self._credit = 0.0
        self.fake: dict[tuple[int, int], Pose] = {}

    def extra_candidates(self, frame_k: int, kf_frames: dict, real: list) -> list[int]:
        """Node ids to add as adversarial candidates for keyframe ``frame_k``.

        ``kf_frames`` maps earlier node ids to their frame indices.
        """
        if self.rate == 0.0:
            return []
        self._credit += len(real) * self.rate / (1.0 - self.rate)
        out = []
        while self._credit >= 1.0:
            far = [n for n, f in kf_frames.items()
                   if np.linalg.norm(self.gt[f].t - self.gt[frame_k].t) > self.min_distance
                   and n not in real and n not in out]
            if not far:
                break
            node = int(far[int(self.rng.integers(len(far)))])
            fake = Pose(rot_exp(self.rng.normal(size=3) * 0.05),
                        np.array([self.rng.normal() * 0.5, 0.0, self.rng.normal() * 0.5]) +
                        np.array([0.5, 0.0, 0.0]))
            self.fake[(node, frame_k)] = fake
            out.append(node)
            self._credit -= 1.0
        return out

    def matches(self, node_a: int, frame_k: int, obs_k: SyntheticObservation):
        fake = self.fake[(node_a, frame_k)]
        Pa = fake.act(obs_k.keypoint_points)
        z = Pa[:, 2]
        zs = np.where(z > 0.1, z, 1.0)
        u = self.camera.fx * Pa[:, 0] / zs + self.camera.cx
        v = self.camera.fy * Pa[:, 1] / zs + self.camera.cy
        ok = (z > 0.1) & (u >= 0) & (u <= self.camera.width - 1) & (v >= 0) & \
             (v <= self.camera.height - 1)
        pa = np.column_stack([u, v])[ok]
        pa = pa + self.rng.normal(scale=self.pixel_sigma, size=pa.shape)
        return pa, obs_k.keypoints[ok]
