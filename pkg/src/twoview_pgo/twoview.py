"""Two-view geometry: essential matrices, triangulation, depth lifting, PnP.

Frame convention: for an image pair ``(a, b)`` the estimated relative pose
``T_ab = (R, t)`` maps points from camera ``b`` into camera ``a``
(``x_a = R x_b + t``).  The essential matrix is ``E = [t]x R`` and satisfies
``x_a^T E x_b = 0`` for homogeneous normalized image points.  Likewise
:func:`solve_pnp` returns the pose mapping the 3D points' frame into the
frame of the camera that observed the pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    AmbiguousDecompositionError, DegenerateParallaxError, InsufficientDataError,
    NoConsensusError, ParameterError,
)
from .se3 import Pose, hat, pose_exp, rot_exp

_BATCH = 64


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points) -> np.ndarray:
        """Pixels of camera-frame points (no visibility check)."""
        p = np.asarray(points, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx,
                         self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)


@dataclass
class RansacParams:
    max_iterations: int = 1000
    inlier_threshold: float = 1e-3
    min_inliers: int = 15
    confidence: float = 0.999
    rng_seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise ParameterError("inlier_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ParameterError("confidence must lie in (0, 1)")


@dataclass
class DepthMap:
    """Metric z-depth per pixel; non-finite or non-positive cells are invalid."""

    values: np.ndarray

    def valid(self) -> np.ndarray:
        v = self.values
        return np.isfinite(v) & (v > 0)


@dataclass
class PointMap:
    """Camera-frame 3D point per pixel; non-finite cells are invalid."""

    values: np.ndarray

    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.values), axis=-1)


def _as_K(K):
    return K.K if isinstance(K, CameraIntrinsics) else np.asarray(K, dtype=float)


def normalize_pixels(pixels, K) -> np.ndarray:
    """Bearings ``K^-1 [u, v, 1]^T`` (z = 1, not unit length)."""
    K = _as_K(K)
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    x = (px[:, 0] - K[0, 2] - K[0, 1] * (px[:, 1] - K[1, 2]) / K[1, 1]) / K[0, 0]
    y = (px[:, 1] - K[1, 2]) / K[1, 1]
    return np.stack([x, y, np.ones_like(x)], axis=1)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _adaptive_iterations(inlier_ratio, sample_size, confidence, cap):
    if inlier_ratio <= 0.0:
        return cap
    if inlier_ratio >= 1.0:
        return 1
    denom = math.log(1.0 - inlier_ratio ** sample_size)
    if denom >= 0.0:
        return cap
    return min(cap, int(math.ceil(math.log(1.0 - confidence) / denom)))


# essential matrix --------------------------------------------------------------

def _hartley(x):
    """Similarity transforms moving 2D points to zero mean, mean norm sqrt(2)."""
    mean = x.mean(axis=-2)
    d = np.linalg.norm(x - mean[..., None, :], axis=-1).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * mean[..., 0]
    T[..., 1, 2] = -s * mean[..., 1]
    T[..., 2, 2] = 1.0
    return T


def _project_to_essential(E):
    U, _, Vt = np.linalg.svd(E)
    return U @ (np.array([1.0, 1.0, 0.0])[..., :, None] * Vt)


def _eight_point(xa, xb):
    """Batched normalized 8-point on ``(..., n, 2)`` normalized image points."""
    Ta, Tb = _hartley(xa), _hartley(xb)
    ones = np.ones(xa.shape[:-1] + (1,))
    ha = np.einsum("...ij,...nj->...ni", Ta, np.concatenate([xa, ones], axis=-1))
    hb = np.einsum("...ij,...nj->...ni", Tb, np.concatenate([xb, ones], axis=-1))
    A = (ha[..., :, :, None] * hb[..., :, None, :]).reshape(xa.shape[:-1] + (9,))
    if A.shape[-2] < 9:
        pad = np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))
        A = np.concatenate([A, pad], axis=-2)
    _, _, Vt = np.linalg.svd(A)
    En = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    E = np.swapaxes(Ta, -1, -2) @ En @ Tb
    E = _project_to_essential(E)
    return E / np.linalg.norm(E, axis=(-2, -1), keepdims=True)


def epipolar_angular_error(E, fa, fb) -> np.ndarray:
    """Symmetric angular distance of bearings to their epipolar planes.

    ``E`` may be a single matrix or a batch ``(m, 3, 3)``; returns the larger
    of the two one-sided angles (radians), shape ``(n,)`` or ``(m, n)``.
    """
    ua, ub = _unit(fa), _unit(fb)
    na = np.einsum("...ij,nj->...ni", E, ub)
    nb = np.einsum("...ji,nj->...ni", E, ua)
    num = np.abs(np.einsum("ni,...ni->...n", ua, na))
    da = np.linalg.norm(na, axis=-1)
    db = np.linalg.norm(nb, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ea = np.arcsin(np.clip(num / da, 0.0, 1.0))
        eb = np.arcsin(np.clip(num / db, 0.0, 1.0))
    err = np.maximum(ea, eb)
    return np.where(np.isfinite(err), err, np.pi / 2)


def _sampson_residuals(E, xa, xb):
    Exb = xb @ E.T
    Etxa = xa @ E
    num = np.einsum("ni,ni->n", xa, Exb)
    den = np.sqrt(Exb[:, 0] ** 2 + Exb[:, 1] ** 2 + Etxa[:, 0] ** 2 + Etxa[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def _refine_essential(R0, t0, xa, xb, scale=None):
    """Minimize Sampson error over rotation and translation direction.

    With ``scale`` set, residuals pass through a Cauchy loss of that width so
    near-threshold mismatches carry little weight.
    """
    t0 = t0 / np.linalg.norm(t0)
    basis = np.linalg.svd(t0[None])[2][1:].T

    def unpack(p):
        R = R0 @ rot_exp(p[:3])
        t = t0 + basis @ p[3:]
        return R, t / np.linalg.norm(t)

    def fun(p):
        R, t = unpack(p)
        return _sampson_residuals(hat(t) @ R, xa, xb)

    if scale is None:
        sol = least_squares(fun, np.zeros(5), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    else:
        sol = least_squares(fun, np.zeros(5), method="trf", loss="cauchy", f_scale=scale,
                            xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if sol.cost > 0.5 * np.sum(fun(np.zeros(5)) ** 2) and scale is None:
        return R0, t0
    return unpack(sol.x)


def estimate_essential(pixels_a, pixels_b, K_a, K_b, params: RansacParams | None = None):
    """RANSAC estimate of ``E`` with ``x_a^T E x_b = 0``.

    Hypotheses come from normalized 8-point samples; inliers are judged by
    :func:`epipolar_angular_error`.  The consensus set is re-fitted and then
    refined by minimizing the Sampson error.  Returns ``(E, inlier_mask)``
    with ``||E||_F = 1``.
    """
    params = params or RansacParams()
    fa = normalize_pixels(pixels_a, K_a)
    fb = normalize_pixels(pixels_b, K_b)
    n = len(fa)
    if n < 8 or len(fb) != n:
        raise InsufficientDataError(f"essential estimation needs >= 8 correspondences, got {n}")
    xa, xb = fa[:, :2], fb[:, :2]
    rng = np.random.default_rng(params.rng_seed)
    best_count, best_score, best_E = -1, np.inf, None
    needed = params.max_iterations
    done = 0
    while done < min(needed, params.max_iterations):
        m = min(_BATCH, params.max_iterations - done)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :8]
        Es = _eight_point(xa[idx], xb[idx])
        err = epipolar_angular_error(Es, fa, fb)
        inl = err < params.inlier_threshold
        counts = inl.sum(axis=1)
        scores = np.where(inl, err, params.inlier_threshold).sum(axis=1)
        k = int(np.lexsort((scores, -counts))[0])
        if counts[k] > best_count or (counts[k] == best_count and scores[k] < best_score):
            best_count, best_score, best_E = int(counts[k]), float(scores[k]), Es[k]
            needed = _adaptive_iterations(best_count / n, 8, params.confidence,
                                          params.max_iterations)
        done += m
    if best_count < max(params.min_inliers, 8):
        raise NoConsensusError(f"essential RANSAC found {best_count} inliers")
    mask = epipolar_angular_error(best_E, fa, fb) < params.inlier_threshold
    E = _eight_point(xa[mask][None], xb[mask][None])[0]
    mask_ls = epipolar_angular_error(E, fa, fb) < params.inlier_threshold
    if mask_ls.sum() < mask.sum():
        E, mask_ls = best_E, mask
    mask = mask_ls
    for _ in range(3):
        try:
            R, t = decompose_essential(E, pixels_a[mask], pixels_b[mask], K_a, K_b)
        except (AmbiguousDecompositionError, InsufficientDataError):
            break
        R, t = _refine_essential(R, t, fa[mask], fb[mask], scale=0.25 * params.inlier_threshold)
        E_ref = hat(t) @ R
        E_ref /= np.linalg.norm(E_ref)
        mask_ref = epipolar_angular_error(E_ref, fa, fb) < params.inlier_threshold
        if mask_ref.sum() < 8:
            break
        stable = np.array_equal(mask_ref, mask)
        E, mask = E_ref, mask_ref
        if stable:
            break
    return E, mask


def _triangulate_batch(fa, fb, R, t):
    """Midpoint triangulation of many rays; returns points, depths, valid flag."""
    d = fb @ R.T
    aa = np.einsum("ni,ni->n", fa, fa)
    bb = np.einsum("ni,ni->n", d, d)
    ab = np.einsum("ni,ni->n", fa, d)
    at = fa @ t
    bt = d @ t
    det = aa * bb - ab * ab
    sin2 = det / (aa * bb)
    valid = sin2 > 1e-12  # angle between rays > 1e-6 rad
    safe = np.where(valid, det, 1.0)
    la = (bb * at - ab * bt) / safe
    lb = (ab * at - aa * bt) / safe
    pts = 0.5 * (la[:, None] * fa + t + lb[:, None] * d)
    return pts, la, lb, valid


def triangulate(bearing_a, bearing_b, relative_pose: Pose):
    """Midpoint of the common perpendicular of two rays.

    ``relative_pose`` is ``T_ab``.  Returns ``(point_in_a, depth_a, depth_b)``
    where each depth is the multiple of the given bearing vector, i.e. the
    z-depth when bearings come from :func:`normalize_pixels`.
    """
    fa = np.asarray(bearing_a, dtype=float)[None]
    fb = np.asarray(bearing_b, dtype=float)[None]
    pts, la, lb, valid = _triangulate_batch(fa, fb, relative_pose.R, relative_pose.t)
    if not valid[0]:
        raise DegenerateParallaxError("rays are parallel")
    return pts[0], float(la[0]), float(lb[0])


def essential_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    u3 = U[:, 2]
    out = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (u3, -u3):
            out.append((R, t / np.linalg.norm(t)))
    return out


def cheirality_counts(E, fa, fb):
    out = []
    for R, t in essential_candidates(E):
        _, la, lb, valid = _triangulate_batch(fa, fb, R, t)
        out.append(int(np.sum(valid & (la > 0) & (lb > 0))))
    return out


def decompose_essential(E, pixels_a, pixels_b, K_a, K_b, tie_ratio=0.95):
    """Split ``E`` into ``(R, unit t)`` of ``T_ab`` by the cheirality vote.

    Raises :class:`AmbiguousDecompositionError` when no candidate wins
    clearly (runner-up within 5% of the best count, or no votes at all).
    """
    fa = normalize_pixels(pixels_a, K_a)
    fb = normalize_pixels(pixels_b, K_b)
    if len(fa) < 5:
        raise InsufficientDataError("decomposition needs >= 5 correspondences")
    cands = essential_candidates(E)
    counts = cheirality_counts(E, fa, fb)
    order = np.argsort(counts)[::-1]
    best, second = counts[order[0]], counts[order[1]]
    if best == 0 or second >= tie_ratio * best:
        raise AmbiguousDecompositionError(f"cheirality counts {counts} are not decisive")
    return cands[order[0]]


# rotation-only model -------------------------------------------------------------

def fit_rotation(fa, fb) -> np.ndarray:
    """Rotation ``R`` best aligning unit bearings ``fa ~ R fb`` (Kabsch)."""
    ua, ub = _unit(fa), _unit(fb)
    U, _, Vt = np.linalg.svd(ua.T @ ub)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ S @ Vt


def count_rotation_inliers(fa, fb, threshold) -> int:
    """Correspondences explained by a best-fit zero-baseline (rotation-only) model."""
    if len(fa) == 0:
        return 0
    R = fit_rotation(fa, fb)
    ua, ub = _unit(fa), _unit(fb)
    cosang = np.clip(np.einsum("ni,ni->n", ua, ub @ R.T), -1.0, 1.0)
    return int(np.sum(np.arccos(cosang) < threshold))


# lifting ---------------------------------------------------------------------------

def _cells(keypoints, shape):
    kp = np.atleast_2d(np.asarray(keypoints, dtype=float))
    col = np.floor(kp[:, 0] + 0.5).astype(int)
    row = np.floor(kp[:, 1] + 0.5).astype(int)
    inside = (col >= 0) & (col < shape[1]) & (row >= 0) & (row < shape[0])
    return row, col, inside


def lift_keypoints_depth(keypoints, depth: DepthMap, K, max_depth=30.0):
    """3D points ``d * K^-1 [u, v, 1]`` for keypoints with valid depth.

    Depth is read from the nearest cell.  Returns ``(points, kept)`` where
    ``kept`` indexes the surviving keypoints.
    """
    kp = np.atleast_2d(np.asarray(keypoints, dtype=float))
    row, col, inside = _cells(kp, depth.values.shape)
    d = np.full(len(kp), np.nan)
    d[inside] = depth.values[row[inside], col[inside]]
    keep = np.isfinite(d) & (d > 0) & (d <= max_depth)
    kept = np.nonzero(keep)[0]
    pts = d[kept, None] * normalize_pixels(kp[kept], K) if len(kept) else np.zeros((0, 3))
    return pts, kept


def lift_keypoints_pointmap(keypoints, pointmap: PointMap, max_depth=np.inf):
    kp = np.atleast_2d(np.asarray(keypoints, dtype=float))
    row, col, inside = _cells(kp, pointmap.values.shape[:2])
    pts = np.full((len(kp), 3), np.nan)
    pts[inside] = pointmap.values[row[inside], col[inside]]
    keep = np.all(np.isfinite(pts), axis=1) & (pts[:, 2] > 0) & (pts[:, 2] <= max_depth)
    kept = np.nonzero(keep)[0]
    return pts[kept], kept


# PnP ---------------------------------------------------------------------------------

def _kabsch_batch(P, Q):
    """Rigid ``(R, t)`` with ``Q ~ R P + t`` for batches of point sets."""
    mp = P.mean(axis=-2)
    mq = Q.mean(axis=-2)
    C = np.swapaxes(Q - mq[..., None, :], -1, -2) @ (P - mp[..., None, :])
    U, _, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(U @ Vt))
    S = np.ones(U.shape[:-2] + (3,))
    S[..., 2] = d
    R = U @ (S[..., :, None] * Vt)
    t = mq - np.einsum("...ij,...j->...i", R, mp)
    return R, t


def p3p_grunert(P, f):
    """All P3P solutions for batches of 3 points ``P`` and unit bearings ``f``.

    ``P`` and ``f`` have shape ``(m, 3, 3)``.  Returns ``(R, t, sample_index)``
    for every real, positive solution.
    """
    a2 = np.sum((P[:, 1] - P[:, 2]) ** 2, axis=1)
    b2 = np.sum((P[:, 0] - P[:, 2]) ** 2, axis=1)
    c2 = np.sum((P[:, 0] - P[:, 1]) ** 2, axis=1)
    ca = np.einsum("mi,mi->m", f[:, 1], f[:, 2])
    cb = np.einsum("mi,mi->m", f[:, 0], f[:, 2])
    cg = np.einsum("mi,mi->m", f[:, 0], f[:, 1])
    ok = b2 > 1e-12
    b2 = np.where(ok, b2, 1.0)
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1.0) ** 2 - 4.0 * c2 / b2 * ca ** 2
    A3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca ** 2 * cb)
    A2 = 2.0 * (amc ** 2 - 1.0 + 2.0 * amc ** 2 * cb ** 2 + 2.0 * (b2 - c2) / b2 * ca ** 2
                - 4.0 * apc * ca * cb * cg + 2.0 * (b2 - a2) / b2 * cg ** 2)
    A1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg ** 2 * cb - (1.0 - apc) * ca * cg)
    A0 = (1.0 + amc) ** 2 - 4.0 * a2 / b2 * cg ** 2
    ok &= np.abs(A4) > 1e-12
    A4s = np.where(ok, A4, 1.0)
    m = len(P)
    comp = np.zeros((m, 4, 4))
    comp[:, 0, :] = -np.stack([A3, A2, A1, A0], axis=1) / A4s[:, None]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    roots = np.linalg.eigvals(comp)
    real = ok[:, None] & (np.abs(roots.imag) < 1e-6 * np.maximum(1.0, np.abs(roots.real)))
    real &= roots.real > 0
    si, ri = np.nonzero(real)
    if len(si) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int)
    v = roots.real[si, ri]
    amc_s, cb_s, cg_s, ca_s = amc[si], cb[si], cg[si], ca[si]
    den = 2.0 * (cg_s - v * ca_s)
    good = np.abs(den) > 1e-12
    u = ((-1.0 + amc_s) * v ** 2 - 2.0 * amc_s * cb_s * v + 1.0 + amc_s) / np.where(good, den, 1.0)
    den1 = 1.0 + v ** 2 - 2.0 * v * cb_s
    good &= den1 > 1e-12
    s1sq = b2[si] / np.where(good, den1, 1.0)
    good &= (s1sq > 0) & (u > 0) & np.isfinite(s1sq)
    si, u, v, s1sq = si[good], u[good], v[good], s1sq[good]
    s1 = np.sqrt(s1sq)
    depths = np.stack([s1, u * s1, v * s1], axis=1)
    Q = depths[:, :, None] * f[si]
    R, t = _kabsch_batch(P[si], Q)
    return R, t, si


def reprojection_errors(R, t, points, pixels, K):
    """Pixel errors of ``points`` under pose(s) ``(R, t)``; inf behind the camera."""
    K = _as_K(K)
    cam = np.einsum("...ij,nj->...ni", R, points) + t[..., None, :]
    z = cam[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = K[0, 0] * cam[..., 0] / zs + K[0, 2]
    v = K[1, 1] * cam[..., 1] / zs + K[1, 2]
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    return np.where(front, err, np.inf)


def _refine_pnp(pose: Pose, points, pixels, K):
    def fun(xi):
        p = pose @ pose_exp(xi)
        cam = points @ p.R.T + p.t
        proj = np.stack([K[0, 0] * cam[:, 0] / cam[:, 2] + K[0, 2],
                         K[1, 1] * cam[:, 1] / cam[:, 2] + K[1, 2]], axis=1)
        return (proj - pixels).ravel()

    sol = least_squares(fun, np.zeros(6), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if np.sum(sol.fun ** 2) <= np.sum(fun(np.zeros(6)) ** 2):
        return pose @ pose_exp(sol.x)
    return pose


def solve_pnp(points_3d, pixels, K, params: RansacParams | None = None):
    """Pose mapping ``points_3d`` into the camera that observed ``pixels``.

    P3P RANSAC with a pixel reprojection threshold, then Levenberg-Marquardt
    refinement on the inliers.  Returns ``(Pose, inlier_mask)``.
    """
    params = params or RansacParams(inlier_threshold=2.0)
    K = _as_K(K)
    P = np.asarray(points_3d, dtype=float)
    px = np.asarray(pixels, dtype=float)
    n = len(P)
    if n < 4 or len(px) != n:
        raise InsufficientDataError(f"PnP needs >= 4 correspondences, got {n}")
    f = _unit(normalize_pixels(px, K))
    rng = np.random.default_rng(params.rng_seed)
    best_count, best_score, best = -1, np.inf, None
    needed = params.max_iterations
    done = 0
    while done < min(needed, params.max_iterations):
        m = min(_BATCH, params.max_iterations - done)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :3]
        R, t, _ = p3p_grunert(P[idx], f[idx])
        done += m
        if len(R) == 0:
            continue
        err = reprojection_errors(R, t, P, px, K)
        inl = err < params.inlier_threshold
        counts = inl.sum(axis=1)
        scores = np.where(inl, err, params.inlier_threshold).sum(axis=1)
        k = int(np.lexsort((scores, -counts))[0])
        if counts[k] > best_count or (counts[k] == best_count and scores[k] < best_score):
            best_count, best_score, best = int(counts[k]), float(scores[k]), Pose(R[k], t[k])
            needed = _adaptive_iterations(best_count / n, 3, params.confidence,
                                          params.max_iterations)
    if best is None or best_count < max(params.min_inliers, 4):
        raise NoConsensusError(f"PnP RANSAC found {max(best_count, 0)} inliers")
    pose = best
    mask = reprojection_errors(pose.R, pose.t, P, px, K) < params.inlier_threshold
    for _ in range(2):
        refined = _refine_pnp(pose, P[mask], px[mask], K)
        new_mask = reprojection_errors(refined.R, refined.t, P, px, K) < params.inlier_threshold
        if new_mask.sum() < mask.sum():
            break
        pose, same = refined, np.array_equal(new_mask, mask)
        mask = new_mask
        if same:
            break
    return pose, mask
