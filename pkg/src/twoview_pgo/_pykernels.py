"""Vectorized numpy implementation of the per-edge linearization kernels.

Every function takes gathered endpoint arrays (one row per edge) and returns
residuals in ``(rotation, translation)`` order together with the 6x6
Jacobians with respect to right perturbations of each endpoint.  The
compiled module ``_ckernels`` exposes the same functions.
"""
import numpy as np

_I3 = np.eye(3)


def _hat(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _mm(a, b):
    return np.matmul(a, b)


def _mv(a, v):
    return np.einsum("...ij,...j->...i", a, v)


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < 1e-8
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(ts) / ts)
    b = np.where(small, 0.5, (1.0 - np.cos(ts)) / (ts * ts))
    W = _hat(w)
    return _I3 + a[..., None, None] * W + b[..., None, None] * _mm(W, W)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    skew = np.stack([R[..., 2, 1] - R[..., 1, 2],
                     R[..., 0, 2] - R[..., 2, 0],
                     R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    s = 0.5 * np.linalg.norm(skew, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    out = 0.5 * skew
    reg = (theta >= 1e-8) & (np.pi - theta > 1e-3)
    if np.any(reg):
        out[reg] = (theta[reg] / (2.0 * s[reg]))[:, None] * skew[reg]
    near = np.pi - theta <= 1e-3
    if np.any(near):
        # rare branch, defer to the scalar routine
        from .se3 import rot_log
        idx = np.nonzero(near)
        out[idx] = np.array([rot_log(m) for m in R[idx]])
    return out


def _coeffs_jl_inv(theta):
    small = theta < 1e-5
    ts = np.where(small, 1.0, theta)
    coef = 1.0 / (ts * ts) - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts))
    return np.where(small, 1.0 / 12.0, coef)


def so3_left_jacobian(w):
    theta = np.linalg.norm(w, axis=-1)
    small = theta < 1e-5
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(ts)) / (ts * ts))
    b = np.where(small, 1.0 / 6.0, (ts - np.sin(ts)) / (ts ** 3))
    W = _hat(w)
    return _I3 + a[..., None, None] * W + b[..., None, None] * _mm(W, W)


def so3_left_jacobian_inv(w):
    theta = np.linalg.norm(w, axis=-1)
    W = _hat(w)
    return _I3 - 0.5 * W + _coeffs_jl_inv(theta)[..., None, None] * _mm(W, W)


def _se3_q(w, rho):
    theta = np.linalg.norm(w, axis=-1)
    W, P = _hat(w), _hat(rho)
    WP, PW = _mm(W, P), _mm(P, W)
    WPW = _mm(WP, W)
    small = theta < 1e-4
    ts = np.where(small, 1.0, theta)
    t2 = ts * ts
    st, ct = np.sin(ts), np.cos(ts)
    th2 = theta * theta
    c1 = np.where(small, 1.0 / 6.0 - th2 / 120.0, (ts - st) / (t2 * ts))
    c2 = np.where(small, 1.0 / 24.0 - th2 / 720.0, (t2 + 2.0 * ct - 2.0) / (2.0 * t2 * t2))
    c3 = np.where(small, 1.0 / 120.0 - th2 / 2520.0,
                  (2.0 * ts - 3.0 * st + ts * ct) / (2.0 * t2 * t2 * ts))
    c1, c2, c3 = (c[..., None, None] for c in (c1, c2, c3))
    return (0.5 * P + c1 * (WP + PW + WPW)
            + c2 * (_mm(W, WP) + _mm(PW, W) - 3.0 * WPW)
            + c3 * (_mm(WPW, W) + _mm(W, WPW)))


def se3_log(R, t):
    w = so3_log(R)
    return np.concatenate([w, _mv(so3_left_jacobian_inv(w), t)], axis=-1)


def se3_right_jacobian_inv(xi):
    w, rho = -xi[..., :3], -xi[..., 3:]
    Ai = so3_left_jacobian_inv(w)
    Q = _se3_q(w, rho)
    J = np.zeros(xi.shape[:-1] + (6, 6))
    J[..., :3, :3] = Ai
    J[..., 3:, 3:] = Ai
    J[..., 3:, :3] = -_mm(_mm(Ai, Q), Ai)
    return J


def retract(R, t, delta):
    """Right-multiplicative update ``X <- X exp(delta)`` for a batch of poses."""
    dR = so3_exp(delta[:, :3])
    dt = _mv(so3_left_jacobian(delta[:, :3]), delta[:, 3:])
    return _mm(R, dR), t + _mv(R, dt)


def absolute_terms(Ra, ta, Rb, tb, Rm, tm):
    RaT = np.swapaxes(Ra, -1, -2)
    RE = _mm(RaT, Rb)
    tE = _mv(RaT, tb - ta)
    RmT = np.swapaxes(Rm, -1, -2)
    r = se3_log(_mm(RmT, RE), _mv(RmT, tE - tm))
    Jri = se3_right_jacobian_inv(r)
    RET = np.swapaxes(RE, -1, -2)
    adj = np.zeros(RE.shape[:-2] + (6, 6))
    adj[..., :3, :3] = RET
    adj[..., 3:, 3:] = RET
    adj[..., 3:, :3] = -_mm(RET, _hat(tE))
    Ja = -_mm(Jri, adj)
    return r, Ja, Jri


def scale_free_terms(Ra, ta, Rb, tb, Rm, dm):
    """Residual ``[log(Rm^T R_ab), d - t_ab/|t_ab|]`` and its Jacobians.

    Also returns ``|t_ab|`` so the caller can reject degenerate rows; the
    Jacobian rows for a zero-length expected translation are left at zero.
    """
    RaT = np.swapaxes(Ra, -1, -2)
    RE = _mm(RaT, Rb)
    tE = _mv(RaT, tb - ta)
    phi = so3_log(_mm(np.swapaxes(Rm, -1, -2), RE))
    norm = np.linalg.norm(tE, axis=-1)
    ok = norm > 0.0
    safe = np.where(ok, norm, 1.0)
    n = np.where(ok[..., None], tE / safe[..., None], 0.0)
    r = np.concatenate([phi, dm - n], axis=-1)
    Jri = so3_left_jacobian_inv(-phi)
    P = (_I3 - n[..., :, None] * n[..., None, :]) / safe[..., None, None]
    P = np.where(ok[..., None, None], P, 0.0)
    shape = RE.shape[:-2] + (6, 6)
    Ja = np.zeros(shape)
    Jb = np.zeros(shape)
    Ja[..., :3, :3] = -_mm(Jri, np.swapaxes(RE, -1, -2))
    Jb[..., :3, :3] = Jri
    Ja[..., 3:, :3] = -_mm(P, _hat(tE))
    Ja[..., 3:, 3:] = P
    Jb[..., 3:, 3:] = -_mm(P, RE)
    return r, Ja, Jb, norm
