"""Rotation and rigid-transform arithmetic on SO(3) / SE(3).

Conventions used throughout the package:

* Rotations are plain 3x3 orthonormal ``ndarray`` objects.
* A :class:`Pose` ``T_ab`` maps coordinates expressed in frame ``b`` into
  frame ``a``: ``p_a = R @ p_b + t``.  World poses are camera-to-world.
* Twists are 6-vectors ordered ``(rotation, translation)``: the first three
  entries are an axis-angle vector in radians, the last three are meters.
* Perturbations are applied on the right, ``X <- X @ pose_exp(xi)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

SMALL_ANGLE = 1e-8
# below this distance to pi the axis is read off the symmetric part of R
NEAR_PI = 1e-3


def hat(v):
    """Skew-symmetric matrix ``[v]x`` such that ``hat(v) @ w == cross(v, w)``."""
    return np.array(
        [[0.0, -v[2], v[1]],
         [v[2], 0.0, -v[0]],
         [-v[1], v[0], 0.0]]
    )


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def rot_exp(axis_angle) -> np.ndarray:
    """Rodrigues formula, with a second-order Taylor branch near zero."""
    w = np.asarray(axis_angle, dtype=float)
    theta = math.sqrt(float(w @ w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def rot_log(R) -> np.ndarray:
    """Axis-angle vector of ``R``.

    At exactly ``theta == pi`` the axis sign is arbitrary; the returned
    vector is ``+pi * axis`` where ``axis`` has its largest-magnitude
    component positive.
    """
    R = np.asarray(R, dtype=float)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * math.sqrt(float(skew @ skew))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        return 0.5 * skew
    if math.pi - theta > NEAR_PI:
        return (theta / (2.0 * s)) * skew
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    proj = float(axis @ skew)
    if proj < 0.0 or (proj == 0.0 and axis[np.argmax(np.abs(axis))] < 0.0):
        axis = -axis
    return theta * axis


def so3_left_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    W = hat(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + (1.0 / 6.0) * (W @ W)
    t2 = theta * theta
    return (np.eye(3) + ((1.0 - math.cos(theta)) / t2) * W
            + ((theta - math.sin(theta)) / (t2 * theta)) * (W @ W))


def so3_left_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    W = hat(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + (1.0 / 12.0) * (W @ W)
    t2 = theta * theta
    coef = 1.0 / t2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * W + coef * (W @ W)


def so3_right_jacobian(w) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(w, dtype=float))


def so3_right_jacobian_inv(w) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(w, dtype=float))


def _se3_q(w, rho) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian."""
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    W, P = hat(w), hat(rho)
    WP, PW = W @ P, P @ W
    WPW = W @ P @ W
    if theta < 1e-4:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        t2 = theta * theta
        st, ct = math.sin(theta), math.cos(theta)
        c1 = (theta - st) / (t2 * theta)
        c2 = (t2 + 2.0 * ct - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * st + theta * ct) / (2.0 * t2 * t2 * theta)
    return (0.5 * P + c1 * (WP + PW + WPW)
            + c2 * (W @ WP + PW @ W - 3.0 * WPW)
            + c3 * (WPW @ W + W @ WPW))


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    J = np.zeros((6, 6))
    Jl = so3_left_jacobian(xi[:3])
    J[:3, :3] = Jl
    J[3:, 3:] = Jl
    J[3:, :3] = _se3_q(xi[:3], xi[3:])
    return J


def se3_right_jacobian_inv(xi) -> np.ndarray:
    """Inverse right Jacobian, ``d log(T exp(d)) / d d`` at ``d = 0``."""
    xi = -np.asarray(xi, dtype=float)
    Ai = so3_left_jacobian_inv(xi[:3])
    Q = _se3_q(xi[:3], xi[3:])
    J = np.zeros((6, 6))
    J[:3, :3] = Ai
    J[3:, 3:] = Ai
    J[3:, :3] = -Ai @ Q @ Ai
    return J


@dataclass(frozen=True, eq=False)
class Pose:
    """Immutable rigid transform ``(R, t)``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quat(cls, t, q_xyzw) -> "Pose":
        return cls(_ScipyRotation.from_quat(q_xyzw).as_matrix(), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def quat(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = _ScipyRotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def act(self, points) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        return np.asarray(points) @ self.R.T + self.t

    def __repr__(self):
        return f"Pose(rotvec={rot_log(self.R).round(6).tolist()}, t={self.t.round(6).tolist()})"


def pose_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.R @ b.R, a.R @ b.t + a.t)


def pose_inverse(p: Pose) -> Pose:
    Rt = p.R.T
    return Pose(Rt, -Rt @ p.t)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """``a^-1 * b``: pose of ``b`` expressed in the frame of ``a``."""
    Rt = a.R.T
    return Pose(Rt @ b.R, Rt @ (b.t - a.t))


def rotation_angle(R) -> float:
    return float(np.linalg.norm(rot_log(R)))


def pose_metrics(t: Pose) -> tuple[float, float]:
    """``(rotation angle [rad], translation norm [m])``."""
    return rotation_angle(t.R), float(np.linalg.norm(t.t))


def pose_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float)
    return Pose(rot_exp(xi[:3]), so3_left_jacobian(xi[:3]) @ xi[3:])


def pose_log(p: Pose) -> np.ndarray:
    w = rot_log(p.R)
    return np.concatenate([w, so3_left_jacobian_inv(w) @ p.t])


def adjoint(p: Pose) -> np.ndarray:
    """Adjoint for the ``(rotation, translation)`` twist ordering."""
    A = np.zeros((6, 6))
    A[:3, :3] = p.R
    A[3:, 3:] = p.R
    A[3:, :3] = hat(p.t) @ p.R
    return A


def retract(p: Pose, xi) -> Pose:
    return pose_compose(p, pose_exp(xi))
